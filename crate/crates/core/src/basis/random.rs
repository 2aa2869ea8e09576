use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BasisError, Result};

/// Gaussian random intercepts as ridge-penalized dummy columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInterceptSpec {
    pub levels: Vec<String>,
}

impl RandomInterceptSpec {
    pub fn new(levels: Vec<String>) -> Result<Self> {
        if levels.is_empty() {
            return Err(BasisError::InvalidSpec("random intercept needs a level".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &levels {
            if !seen.insert(l) {
                return Err(BasisError::InvalidSpec(format!("duplicate level '{l}'")));
            }
        }
        Ok(Self { levels })
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn evaluate<S: AsRef<str>>(&self, x: &[S]) -> Result<DMatrix<f64>> {
        let index: HashMap<&str, usize> = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut out = DMatrix::zeros(x.len(), self.levels.len());
        for (i, label) in x.iter().enumerate() {
            let j = index
                .get(label.as_ref())
                .ok_or_else(|| BasisError::UnknownLevel(label.as_ref().to_string()))?;
            out[(i, *j)] = 1.0;
        }
        Ok(out)
    }

    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim())
    }
}
