use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BlockSummary, FitResult, ThetaEstimate};

pub const FIT_SCHEMA: &str = "epigam.fit.v1";

/// Dense matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDocument {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixDocument {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixDocument {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub name: String,
    pub value: f64,
}

/// Serialized fit shared by the GLM and multinomial models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema: String,
    pub family: String,
    pub coefficients: Vec<CoefficientEntry>,
    pub smoothing: Vec<BlockSummary>,
    pub dispersion: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<ThetaEstimate>,
    pub deviance: f64,
    pub edf_total: f64,
    pub cov_model: MatrixDocument,
    pub cov_sandwich: MatrixDocument,
    pub converged: bool,
    pub iterations: usize,
    pub notes: Vec<String>,
}

impl FitDocument {
    pub fn new(
        family: &str,
        names: &[String],
        beta: &[f64],
        smoothing: Vec<BlockSummary>,
        cov_model: &DMatrix<f64>,
        cov_sandwich: &DMatrix<f64>,
    ) -> Self {
        Self {
            schema: FIT_SCHEMA.to_string(),
            family: family.to_string(),
            coefficients: names
                .iter()
                .zip(beta)
                .map(|(n, v)| CoefficientEntry {
                    name: n.clone(),
                    value: *v,
                })
                .collect(),
            edf_total: smoothing.iter().map(|b| b.edf).sum(),
            smoothing,
            dispersion: 1.0,
            theta: None,
            deviance: 0.0,
            cov_model: cov_model.into(),
            cov_sandwich: cov_sandwich.into(),
            converged: true,
            iterations: 0,
            notes: Vec::new(),
        }
    }
}

impl FitResult {
    pub fn to_document(&self) -> FitDocument {
        let mut doc = FitDocument::new(
            self.family.name(),
            &self.column_names,
            self.beta.as_slice(),
            self.blocks.clone(),
            &self.cov_model,
            &self.cov_sandwich,
        );
        doc.edf_total = self.edf_total();
        doc.dispersion = self.dispersion;
        doc.theta = self.theta;
        doc.deviance = self.deviance;
        doc.converged = self.converged;
        doc.iterations = self.iterations;
        doc.notes = self.notes.clone();
        doc
    }
}
