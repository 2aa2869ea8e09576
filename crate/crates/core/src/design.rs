//! Model terms, data frames and design matrices with penalty blocks.
//!
//! A [`DesignSpec`] lists terms by variable name. Compiling it against a
//! training [`Frame`] fixes everything that depends on the training data
//! (centering transforms, penalty scaling, factor levels) in a
//! [`CompiledDesign`], which then produces a [`DesignMatrix`] for the
//! training rows or for any new frame with the same variables.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{
    apply_centering_constraint, BSplineSpec, BasisError, RandomInterceptSpec, ThinPlateBasis,
    ThinPlateSpec, TruncatedLinearSpec,
};
use crate::linalg::xtwx;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("variable '{0}' not found in frame")]
    MissingVariable(String),
    #[error("variable '{name}' has the wrong type: expected {expected}")]
    WrongType { name: String, expected: &'static str },
    #[error("variable '{name}' has {got} rows, frame has {expected}")]
    LengthMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("term '{term}': unknown level '{level}'")]
    UnknownLevel { term: String, level: String },
    #[error("term '{term}': reference level '{level}' is not among its levels")]
    BadReference { term: String, level: String },
    #[error("term '{term}': {source}")]
    Basis { term: String, source: BasisError },
    #[error("offset has {got} rows, design has {expected}")]
    OffsetLength { expected: usize, got: usize },
    #[error("duplicate term name '{0}'")]
    DuplicateTerm(String),
}

pub type Result<T> = std::result::Result<T, DesignError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Factor(Vec<String>),
    Coords(Vec<(f64, f64)>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Factor(v) => v.len(),
            Column::Coords(v) => v.len(),
        }
    }
}

/// Named columns of equal length.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    n: usize,
    columns: BTreeMap<String, Column>,
}

impl Frame {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            columns: BTreeMap::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn insert(&mut self, name: &str, col: Column) -> Result<()> {
        if col.len() != self.n {
            return Err(DesignError::LengthMismatch {
                name: name.to_string(),
                expected: self.n,
                got: col.len(),
            });
        }
        self.columns.insert(name.to_string(), col);
        Ok(())
    }

    pub fn with_numeric(mut self, name: &str, v: Vec<f64>) -> Result<Self> {
        self.insert(name, Column::Numeric(v))?;
        Ok(self)
    }

    pub fn with_factor<S: Into<String>>(mut self, name: &str, v: Vec<S>) -> Result<Self> {
        self.insert(name, Column::Factor(v.into_iter().map(Into::into).collect()))?;
        Ok(self)
    }

    pub fn with_coords(mut self, name: &str, v: Vec<(f64, f64)>) -> Result<Self> {
        self.insert(name, Column::Coords(v))?;
        Ok(self)
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.columns.get(name) {
            Some(Column::Numeric(v)) => Ok(v),
            Some(_) => Err(DesignError::WrongType {
                name: name.into(),
                expected: "numeric",
            }),
            None => Err(DesignError::MissingVariable(name.into())),
        }
    }

    pub fn factor(&self, name: &str) -> Result<&[String]> {
        match self.columns.get(name) {
            Some(Column::Factor(v)) => Ok(v),
            Some(_) => Err(DesignError::WrongType {
                name: name.into(),
                expected: "factor",
            }),
            None => Err(DesignError::MissingVariable(name.into())),
        }
    }

    pub fn coords(&self, name: &str) -> Result<&[(f64, f64)]> {
        match self.columns.get(name) {
            Some(Column::Coords(v)) => Ok(v),
            Some(_) => Err(DesignError::WrongType {
                name: name.into(),
                expected: "coordinates",
            }),
            None => Err(DesignError::MissingVariable(name.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermSpec {
    /// A numeric column entering linearly.
    Linear { var: String },
    /// Dummy coding; `reference: None` gives one column per level.
    Factor {
        var: String,
        levels: Vec<String>,
        reference: Option<String>,
    },
    /// Products of the non-reference dummies of two factors.
    Interaction {
        a: String,
        a_levels: Vec<String>,
        a_ref: String,
        b: String,
        b_levels: Vec<String>,
        b_ref: String,
    },
    /// P-spline smooth, optionally multiplied by a numeric `by` variable.
    BSpline {
        var: String,
        spec: BSplineSpec,
        centered: bool,
        by: Option<String>,
    },
    TruncatedLinear { var: String, spec: TruncatedLinearSpec },
    ThinPlate {
        var: String,
        spec: ThinPlateSpec,
        centered: bool,
    },
    RandomIntercept { var: String, spec: RandomInterceptSpec },
}

impl TermSpec {
    fn penalized(&self) -> bool {
        !matches!(
            self,
            TermSpec::Linear { .. } | TermSpec::Factor { .. } | TermSpec::Interaction { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub name: String,
    pub spec: TermSpec,
}

/// Ordered model terms plus an intercept flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub intercept: bool,
    pub terms: Vec<Term>,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self::new()
    }
}

impl DesignSpec {
    pub fn new() -> Self {
        Self {
            intercept: true,
            terms: Vec::new(),
        }
    }

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }

    pub fn term(mut self, name: &str, spec: TermSpec) -> Self {
        self.terms.push(Term {
            name: name.to_string(),
            spec,
        });
        self
    }

    pub fn linear(self, var: &str) -> Self {
        self.term(var, TermSpec::Linear { var: var.into() })
    }

    pub fn factor(self, var: &str, levels: Vec<String>, reference: Option<&str>) -> Self {
        self.term(
            var,
            TermSpec::Factor {
                var: var.into(),
                levels,
                reference: reference.map(String::from),
            },
        )
    }

    pub fn has_term(&self, name: &str) -> bool {
        self.terms.iter().any(|t| t.name == name)
    }

    /// Drops a term by name; returns whether it existed.
    pub fn remove_term(&mut self, name: &str) -> bool {
        let before = self.terms.len();
        self.terms.retain(|t| t.name != name);
        before != self.terms.len()
    }

    pub fn compile(&self, frame: &Frame) -> Result<CompiledDesign> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.terms {
            if !seen.insert(t.name.as_str()) {
                return Err(DesignError::DuplicateTerm(t.name.clone()));
            }
        }
        let mut compiled = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            compiled.push(CompiledTerm::compile(term, frame)?);
        }
        Ok(CompiledDesign {
            intercept: self.intercept,
            terms: compiled,
        })
    }
}

#[derive(Debug, Clone)]
enum TermState {
    Plain,
    Factor { index: HashMap<String, usize> },
    Interaction {
        a_index: HashMap<String, usize>,
        b_index: HashMap<String, usize>,
    },
    BSpline { transform: Option<DMatrix<f64>> },
    TruncatedLinear,
    ThinPlate {
        basis: Box<ThinPlateBasis>,
        transform: Option<DMatrix<f64>>,
    },
    RandomIntercept,
}

#[derive(Debug, Clone)]
struct CompiledTerm {
    term: Term,
    state: TermState,
    column_names: Vec<String>,
    /// Scaled penalty for penalized terms.
    penalty: Option<DMatrix<f64>>,
}

fn non_reference(levels: &[String], reference: &str) -> Vec<String> {
    levels.iter().filter(|l| *l != reference).cloned().collect()
}

fn level_index(levels: &[String]) -> HashMap<String, usize> {
    levels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect()
}

impl CompiledTerm {
    fn compile(term: &Term, frame: &Frame) -> Result<Self> {
        let name = &term.name;
        let basis_err = |source| DesignError::Basis {
            term: name.clone(),
            source,
        };
        let (state, column_names) = match &term.spec {
            TermSpec::Linear { var } => {
                frame.numeric(var)?;
                (TermState::Plain, vec![name.clone()])
            }
            TermSpec::Factor {
                levels, reference, ..
            } => {
                let used: Vec<String> = match reference {
                    Some(r) => {
                        if !levels.contains(r) {
                            return Err(DesignError::BadReference {
                                term: name.clone(),
                                level: r.clone(),
                            });
                        }
                        non_reference(levels, r)
                    }
                    None => levels.clone(),
                };
                let names = used.iter().map(|l| format!("{name}[{l}]")).collect();
                (
                    TermState::Factor {
                        index: level_index(&used),
                    },
                    names,
                )
            }
            TermSpec::Interaction {
                a_levels,
                a_ref,
                b_levels,
                b_ref,
                ..
            } => {
                for (lv, r) in [(a_levels, a_ref), (b_levels, b_ref)] {
                    if !lv.contains(r) {
                        return Err(DesignError::BadReference {
                            term: name.clone(),
                            level: r.clone(),
                        });
                    }
                }
                let a_used = non_reference(a_levels, a_ref);
                let b_used = non_reference(b_levels, b_ref);
                let mut names = Vec::new();
                for a in &a_used {
                    for b in &b_used {
                        names.push(format!("{name}[{a}:{b}]"));
                    }
                }
                (
                    TermState::Interaction {
                        a_index: level_index(&a_used),
                        b_index: level_index(&b_used),
                    },
                    names,
                )
            }
            TermSpec::BSpline { spec, centered, .. } => {
                let k = spec.dim() - usize::from(*centered);
                let names = (1..=k).map(|j| format!("{name}.{j}")).collect();
                (TermState::BSpline { transform: None }, names)
            }
            TermSpec::TruncatedLinear { spec, .. } => {
                let mut names = vec![format!("{name}.slope")];
                names.extend(spec.hinges().iter().map(|h| format!("{name}.hinge{h}")));
                (TermState::TruncatedLinear, names)
            }
            TermSpec::ThinPlate { spec, centered, .. } => {
                let basis = spec.build().map_err(basis_err)?;
                let k = basis.dim() - usize::from(*centered);
                let names = (1..=k).map(|j| format!("{name}.{j}")).collect();
                (
                    TermState::ThinPlate {
                        basis: Box::new(basis),
                        transform: None,
                    },
                    names,
                )
            }
            TermSpec::RandomIntercept { spec, .. } => {
                let names = spec.levels.iter().map(|l| format!("{name}[{l}]")).collect();
                (TermState::RandomIntercept, names)
            }
        };
        let mut ct = CompiledTerm {
            term: term.clone(),
            state,
            column_names,
            penalty: None,
        };
        if term.spec.penalized() {
            // Centering transforms and penalty scaling come from the
            // training rows.
            let raw = ct.raw_basis(frame)?;
            let raw_penalty = ct.raw_penalty();
            let (x, s) = match (&term.spec, &mut ct.state) {
                (TermSpec::BSpline { centered: true, .. }, TermState::BSpline { transform })
                | (
                    TermSpec::ThinPlate { centered: true, .. },
                    TermState::ThinPlate { transform, .. },
                ) => {
                    let c = apply_centering_constraint(&raw, &raw_penalty).map_err(basis_err)?;
                    *transform = Some(c.transform);
                    (c.basis, c.penalty)
                }
                _ => (raw, raw_penalty),
            };
            let xtx = xtwx(&x, &vec![1.0; x.nrows()]);
            let sn = s.norm();
            let scale = if sn > 0.0 { xtx.norm() / sn } else { 1.0 };
            let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
            ct.penalty = Some(s * scale);
        }
        Ok(ct)
    }

    fn raw_penalty(&self) -> DMatrix<f64> {
        match (&self.term.spec, &self.state) {
            (TermSpec::BSpline { spec, .. }, _) => spec.penalty_matrix(),
            (TermSpec::TruncatedLinear { spec, .. }, _) => spec.penalty_matrix(),
            (_, TermState::ThinPlate { basis, .. }) => basis.penalty_matrix(),
            (TermSpec::RandomIntercept { spec, .. }, _) => spec.penalty_matrix(),
            _ => DMatrix::zeros(0, 0),
        }
    }

    /// Basis before any centering transform (smooth terms only).
    fn raw_basis(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        let name = &self.term.name;
        let basis_err = |source| DesignError::Basis {
            term: name.clone(),
            source,
        };
        match (&self.term.spec, &self.state) {
            (TermSpec::BSpline { var, spec, by, .. }, _) => {
                let mut m = spec.evaluate(frame.numeric(var)?).map_err(basis_err)?;
                if let Some(b) = by {
                    let mult = frame.numeric(b)?;
                    for (i, mut row) in m.row_iter_mut().enumerate() {
                        row *= mult[i];
                    }
                }
                Ok(m)
            }
            (TermSpec::TruncatedLinear { var, spec }, _) => {
                spec.evaluate(frame.numeric(var)?).map_err(basis_err)
            }
            (TermSpec::ThinPlate { var, .. }, TermState::ThinPlate { basis, .. }) => {
                basis.evaluate(frame.coords(var)?).map_err(basis_err)
            }
            (TermSpec::RandomIntercept { var, spec }, _) => {
                spec.evaluate(frame.factor(var)?).map_err(|e| match e {
                    BasisError::UnknownLevel(level) => DesignError::UnknownLevel {
                        term: name.clone(),
                        level,
                    },
                    other => basis_err(other),
                })
            }
            _ => unreachable!("raw_basis called on an unpenalized term"),
        }
    }

    fn evaluate(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        let n = frame.nrows();
        let name = &self.term.name;
        match (&self.term.spec, &self.state) {
            (TermSpec::Linear { var }, _) => {
                Ok(DMatrix::from_column_slice(n, 1, frame.numeric(var)?))
            }
            (TermSpec::Factor { var, reference, .. }, TermState::Factor { index }) => {
                let x = frame.factor(var)?;
                let mut m = DMatrix::zeros(n, index.len());
                for (i, l) in x.iter().enumerate() {
                    match index.get(l) {
                        Some(&j) => m[(i, j)] = 1.0,
                        None if reference.as_deref() == Some(l.as_str()) => {}
                        None => {
                            return Err(DesignError::UnknownLevel {
                                term: name.clone(),
                                level: l.clone(),
                            })
                        }
                    }
                }
                Ok(m)
            }
            (
                TermSpec::Interaction {
                    a, a_ref, b, b_ref, ..
                },
                TermState::Interaction { a_index, b_index },
            ) => {
                let xa = frame.factor(a)?;
                let xb = frame.factor(b)?;
                let nb = b_index.len();
                let mut m = DMatrix::zeros(n, a_index.len() * nb);
                for i in 0..n {
                    let ia = match a_index.get(&xa[i]) {
                        Some(&j) => Some(j),
                        None if xa[i] == *a_ref => None,
                        None => {
                            return Err(DesignError::UnknownLevel {
                                term: name.clone(),
                                level: xa[i].clone(),
                            })
                        }
                    };
                    let ib = match b_index.get(&xb[i]) {
                        Some(&j) => Some(j),
                        None if xb[i] == *b_ref => None,
                        None => {
                            return Err(DesignError::UnknownLevel {
                                term: name.clone(),
                                level: xb[i].clone(),
                            })
                        }
                    };
                    if let (Some(ia), Some(ib)) = (ia, ib) {
                        m[(i, ia * nb + ib)] = 1.0;
                    }
                }
                Ok(m)
            }
            (_, TermState::BSpline { transform }) | (_, TermState::ThinPlate { transform, .. }) => {
                let raw = self.raw_basis(frame)?;
                Ok(match transform {
                    Some(z) => raw * z,
                    None => raw,
                })
            }
            _ => self.raw_basis(frame),
        }
    }
}

/// Contiguous column range belonging to one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRange {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// One quadratic penalty `βᵀSβ` acting on a contiguous column range.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub s: DMatrix<f64>,
}

/// Model matrix with its offset, column names and penalty blocks.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub offset: Vec<f64>,
    pub column_names: Vec<String>,
    pub terms: Vec<TermRange>,
    pub blocks: Vec<PenaltyBlock>,
}

impl DesignMatrix {
    /// Unpenalized design from a raw matrix.
    pub fn from_matrix(x: DMatrix<f64>, column_names: Vec<String>) -> Self {
        let n = x.nrows();
        let terms = column_names
            .iter()
            .enumerate()
            .map(|(i, c)| TermRange {
                name: c.clone(),
                start: i,
                len: 1,
            })
            .collect();
        Self {
            x,
            offset: vec![0.0; n],
            column_names,
            terms,
            blocks: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != self.nrows() {
            return Err(DesignError::OffsetLength {
                expected: self.nrows(),
                got: offset.len(),
            });
        }
        self.offset = offset;
        Ok(self)
    }

    pub fn term(&self, name: &str) -> Option<&TermRange> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Name of the term owning column `j`.
    pub fn term_of_column(&self, j: usize) -> Option<&str> {
        self.terms
            .iter()
            .find(|t| j >= t.start && j < t.start + t.len)
            .map(|t| t.name.as_str())
    }

    /// Block-diagonal Σ λ_k S_k embedded in p × p.
    pub fn total_penalty(&self, lambda: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for (b, l) in self.blocks.iter().zip(lambda) {
            let mut view = s.view_mut((b.start, b.start), (b.len, b.len));
            view += &b.s * *l;
        }
        s
    }

    /// Rows selected by index, keeping columns and penalties.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let x = self.x.select_rows(rows);
        Self {
            x,
            offset: rows.iter().map(|&i| self.offset[i]).collect(),
            column_names: self.column_names.clone(),
            terms: self.terms.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

/// A design whose data-dependent pieces have been fixed on training data.
#[derive(Debug, Clone)]
pub struct CompiledDesign {
    intercept: bool,
    terms: Vec<CompiledTerm>,
}

pub const INTERCEPT: &str = "(Intercept)";

impl CompiledDesign {
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push(INTERCEPT.to_string());
        }
        for t in &self.terms {
            names.extend(t.column_names.iter().cloned());
        }
        names
    }

    pub fn ncols(&self) -> usize {
        usize::from(self.intercept) + self.terms.iter().map(|t| t.column_names.len()).sum::<usize>()
    }

    pub fn matrix(&self, frame: &Frame, offset: Option<Vec<f64>>) -> Result<DesignMatrix> {
        let n = frame.nrows();
        let p = self.ncols();
        let mut x = DMatrix::zeros(n, p);
        let mut terms = Vec::new();
        let mut blocks = Vec::new();
        let mut col = 0;
        if self.intercept {
            x.column_mut(0).fill(1.0);
            terms.push(TermRange {
                name: INTERCEPT.into(),
                start: 0,
                len: 1,
            });
            col = 1;
        }
        for t in &self.terms {
            let m = t.evaluate(frame)?;
            let k = m.ncols();
            debug_assert_eq!(k, t.column_names.len());
            x.view_mut((0, col), (n, k)).copy_from(&m);
            terms.push(TermRange {
                name: t.term.name.clone(),
                start: col,
                len: k,
            });
            if let Some(s) = &t.penalty {
                if k > 0 {
                    blocks.push(PenaltyBlock {
                        name: t.term.name.clone(),
                        start: col,
                        len: k,
                        s: s.clone(),
                    });
                }
            }
            col += k;
        }
        let offset = match offset {
            Some(o) if o.len() != n => {
                return Err(DesignError::OffsetLength {
                    expected: n,
                    got: o.len(),
                })
            }
            Some(o) => o,
            None => vec![0.0; n],
        };
        Ok(DesignMatrix {
            x,
            offset,
            column_names: self.column_names(),
            terms,
            blocks,
        })
    }

    /// Columns of a single term evaluated on `frame` (which only needs the
    /// variables that term uses). Used for effect grids.
    pub fn term_matrix(&self, name: &str, frame: &Frame) -> Result<DMatrix<f64>> {
        let t = self
            .terms
            .iter()
            .find(|t| t.term.name == name)
            .ok_or_else(|| DesignError::MissingVariable(name.to_string()))?;
        t.evaluate(frame)
    }

    pub fn term_spec(&self, name: &str) -> Option<&TermSpec> {
        self.terms.iter().find(|t| t.term.name == name).map(|t| &t.term.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn factor_reference_is_all_zero() {
        let frame = Frame::new(3)
            .with_factor("wd", vec!["Mon", "Tue", "Wed"])
            .unwrap();
        let spec = DesignSpec::new().factor("wd", levels(&["Mon", "Tue", "Wed"]), Some("Mon"));
        let d = spec.compile(&frame).unwrap().matrix(&frame, None).unwrap();
        assert_eq!(d.ncols(), 3);
        assert_eq!(d.column_names, vec!["(Intercept)", "wd[Tue]", "wd[Wed]"]);
        assert_eq!(d.x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        assert_eq!(d.x.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn unseen_level_is_named() {
        let train = Frame::new(2).with_factor("g", vec!["a", "b"]).unwrap();
        let spec = DesignSpec::new().factor("g", levels(&["a", "b"]), Some("a"));
        let c = spec.compile(&train).unwrap();
        let new = Frame::new(1).with_factor("g", vec!["zz"]).unwrap();
        let err = c.matrix(&new, None).unwrap_err();
        assert_eq!(
            err,
            DesignError::UnknownLevel {
                term: "g".into(),
                level: "zz".into()
            }
        );
    }

    #[test]
    fn interaction_only_for_non_reference_pairs() {
        let frame = Frame::new(4)
            .with_factor("age", vec!["y", "o", "y", "o"])
            .unwrap()
            .with_factor("sex", vec!["m", "m", "f", "f"])
            .unwrap();
        let spec = DesignSpec::new().term(
            "age:sex",
            TermSpec::Interaction {
                a: "age".into(),
                a_levels: levels(&["y", "o"]),
                a_ref: "y".into(),
                b: "sex".into(),
                b_levels: levels(&["m", "f"]),
                b_ref: "m".into(),
            },
        );
        let d = spec.compile(&frame).unwrap().matrix(&frame, None).unwrap();
        let col: Vec<f64> = d.x.column(1).iter().copied().collect();
        assert_eq!(col, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn centered_smooth_has_block_and_zero_sums() {
        let t: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let frame = Frame::new(50).with_numeric("t", t).unwrap();
        let spec = DesignSpec::new().term(
            "s(t)",
            TermSpec::BSpline {
                var: "t".into(),
                spec: BSplineSpec::cubic(8, 0.0, 49.0).unwrap(),
                centered: true,
                by: None,
            },
        );
        let d = spec.compile(&frame).unwrap().matrix(&frame, None).unwrap();
        assert_eq!(d.ncols(), 8);
        assert_eq!(d.blocks.len(), 1);
        assert_eq!(d.blocks[0].start, 1);
        assert_eq!(d.blocks[0].len, 7);
        for j in 1..8 {
            assert!(d.x.column(j).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn random_intercept_unknown_level() {
        let frame = Frame::new(2).with_factor("r", vec!["A", "B"]).unwrap();
        let spec = DesignSpec::new().term(
            "re(r)",
            TermSpec::RandomIntercept {
                var: "r".into(),
                spec: RandomInterceptSpec::new(levels(&["A", "B"])).unwrap(),
            },
        );
        let c = spec.compile(&frame).unwrap();
        let bad = Frame::new(1).with_factor("r", vec!["C"]).unwrap();
        assert!(matches!(
            c.matrix(&bad, None),
            Err(DesignError::UnknownLevel { level, .. }) if level == "C"
        ));
    }
}
