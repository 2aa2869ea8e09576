//! Low-rank thin-plate regression splines in two dimensions.
//!
//! The full radial basis `η(r) = r² log r` at the distinct centers has
//! bending-energy matrix `E_ij = η(|c_i − c_j|)`. The rank-k truncation keeps
//! the k eigenvectors of `E` with the largest absolute eigenvalues, absorbs
//! the side condition `Tᵀδ = 0` (T = [1, lon, lat] at the centers) and
//! appends the affine null space, giving k columns in total: k − 3 wiggly
//! columns followed by `1`, `lon`, `lat`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BasisError, Result};
use crate::linalg::{spd_inverse, sym_eigen_sorted, symmetrize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinPlateSpec {
    pub centers: Vec<(f64, f64)>,
    pub rank: usize,
}

impl ThinPlateSpec {
    pub fn new(centers: Vec<(f64, f64)>, rank: usize) -> Self {
        Self { centers, rank }
    }

    /// Distinct centers in first-seen order.
    pub fn distinct_centers(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &c in &self.centers {
            if !out.iter().any(|o| o.0 == c.0 && o.1 == c.1) {
                out.push(c);
            }
        }
        out
    }

    pub fn build(&self) -> Result<ThinPlateBasis> {
        ThinPlateBasis::new(self)
    }
}

#[derive(Debug, Clone)]
pub struct ThinPlateBasis {
    centers: Vec<(f64, f64)>,
    /// Maps radial evaluations at the centers to wiggly coefficients.
    radial_map: DMatrix<f64>,
    wiggly_penalty: DMatrix<f64>,
}

fn tps_radial(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

impl ThinPlateBasis {
    fn new(spec: &ThinPlateSpec) -> Result<Self> {
        let centers = spec.distinct_centers();
        let nc = centers.len();
        if centers.iter().any(|c| !(c.0.is_finite() && c.1.is_finite())) {
            return Err(BasisError::InvalidSpec("non-finite thin-plate center".into()));
        }
        if nc < 3 {
            return Err(BasisError::InsufficientCenters(nc));
        }
        let mut rank = spec.rank;
        if rank > nc {
            log::warn!("thin-plate rank {rank} exceeds {nc} distinct centers; using {nc}");
            rank = nc;
        }
        if rank < 3 {
            return Err(BasisError::InvalidSpec(format!(
                "thin-plate rank {rank} is below the affine null-space dimension 3"
            )));
        }
        let t = DMatrix::from_fn(nc, 3, |i, j| match j {
            0 => 1.0,
            1 => centers[i].0,
            _ => centers[i].1,
        });
        let ttt = t.tr_mul(&t);
        if spd_inverse(&ttt).is_none() || crate::linalg::weakest_direction(&ttt).0 < 1e-12 {
            return Err(BasisError::InsufficientCenters(nc));
        }
        let wiggly = rank - 3;
        if wiggly == 0 {
            return Ok(Self {
                centers,
                radial_map: DMatrix::zeros(nc, 0),
                wiggly_penalty: DMatrix::zeros(0, 0),
            });
        }
        let e = DMatrix::from_fn(nc, nc, |i, j| tps_radial(dist2(centers[i], centers[j])));
        let (values, vectors) = sym_eigen_sorted(&e);
        let mut order: Vec<usize> = (0..nc).collect();
        order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
        let keep = &order[..rank];
        let uk = DMatrix::from_fn(nc, rank, |i, j| vectors[(i, keep[j])]);
        let dk = DMatrix::from_fn(rank, rank, |i, j| if i == j { values[keep[i]] } else { 0.0 });

        // Null space of Cᵀ with C = U_kᵀ T, via the complementary projector.
        let c = uk.tr_mul(&t);
        let ctc_inv = spd_inverse(&c.tr_mul(&c)).ok_or(BasisError::InsufficientCenters(nc))?;
        let proj = DMatrix::identity(rank, rank) - &c * ctc_inv * c.transpose();
        let (_, pv) = sym_eigen_sorted(&proj);
        let z = pv.columns(0, wiggly).clone_owned();

        let radial_map = &uk * &z;
        let mut wiggly_penalty = z.transpose() * dk * &z;
        symmetrize(&mut wiggly_penalty);
        Ok(Self {
            centers,
            radial_map,
            wiggly_penalty,
        })
    }

    pub fn dim(&self) -> usize {
        self.radial_map.ncols() + 3
    }

    pub fn centers(&self) -> &[(f64, f64)] {
        &self.centers
    }

    /// n × k evaluation: wiggly columns, then `1`, `lon`, `lat`.
    pub fn evaluate(&self, points: &[(f64, f64)]) -> Result<DMatrix<f64>> {
        let w = self.radial_map.ncols();
        let nc = self.centers.len();
        let mut out = DMatrix::zeros(points.len(), w + 3);
        let mut e = vec![0.0; nc];
        for (i, &p) in points.iter().enumerate() {
            if !(p.0.is_finite() && p.1.is_finite()) {
                return Err(BasisError::NonFinite(if p.0.is_finite() { p.1 } else { p.0 }));
            }
            for (ej, &c) in e.iter_mut().zip(&self.centers) {
                *ej = tps_radial(dist2(p, c));
            }
            for j in 0..w {
                let mut acc = 0.0;
                for (k, ek) in e.iter().enumerate() {
                    acc += ek * self.radial_map[(k, j)];
                }
                out[(i, j)] = acc;
            }
            out[(i, w)] = 1.0;
            out[(i, w + 1)] = p.0;
            out[(i, w + 2)] = p.1;
        }
        Ok(out)
    }

    /// Bending-energy penalty; zero on the affine columns.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let w = self.radial_map.ncols();
        let mut s = DMatrix::zeros(w + 3, w + 3);
        s.view_mut((0, 0), (w, w)).copy_from(&self.wiggly_penalty);
        s
    }
}
