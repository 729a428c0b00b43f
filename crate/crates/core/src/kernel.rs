//! Exponential correlation and the spatial factor cross-covariance
//! `C_rs(h) = sum_j A_rj A_sj exp(-phi_j h)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PHI_MIN: f64 = 0.1;
pub const PHI_MAX: f64 = 10.0;

/// `q x k` loadings with the lower-trapezoidal zero pattern (`A[r][j] = 0` for `j > r`).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorLoadings {
    mat: DMatrix<f64>,
}

impl FactorLoadings {
    pub fn zeros(q: usize, k: usize) -> Result<Self> {
        if k == 0 || k > q {
            return Err(Error::Shape(format!("need q >= k >= 1, got q={q}, k={k}")));
        }
        Ok(Self {
            mat: DMatrix::zeros(q, k),
        })
    }

    /// Rejects matrices with a nonzero entry above the diagonal.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        let (q, k) = mat.shape();
        if k == 0 || k > q {
            return Err(Error::Shape(format!("need q >= k >= 1, got q={q}, k={k}")));
        }
        for r in 0..q {
            for j in (r + 1)..k {
                if mat[(r, j)] != 0.0 {
                    return Err(Error::StructuralZero { row: r, col: j });
                }
            }
        }
        Ok(Self { mat })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let q = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged loadings rows".into()));
        }
        Self::new(DMatrix::from_fn(q, k, |r, j| rows[r][j]))
    }

    pub fn q(&self) -> usize {
        self.mat.nrows()
    }

    pub fn k(&self) -> usize {
        self.mat.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn get(&self, r: usize, j: usize) -> f64 {
        self.mat[(r, j)]
    }

    pub fn is_free(r: usize, j: usize) -> bool {
        j <= r
    }

    /// Number of free entries in row `r`.
    pub fn free_in_row(&self, r: usize) -> usize {
        (r + 1).min(self.k())
    }

    pub fn set(&mut self, r: usize, j: usize, value: f64) -> Result<()> {
        if !Self::is_free(r, j) {
            return Err(Error::StructuralZero { row: r, col: j });
        }
        self.mat[(r, j)] = value;
        Ok(())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.q())
            .map(|r| (0..self.k()).map(|j| self.mat[(r, j)]).collect())
            .collect()
    }

    /// Flips each column so its first nonzero loading is positive.
    pub fn align_signs(&self) -> Self {
        let mut mat = self.mat.clone();
        for j in 0..mat.ncols() {
            let first = mat.column(j).iter().copied().find(|v| *v != 0.0);
            if matches!(first, Some(v) if v < 0.0) {
                mat.column_mut(j).neg_mut();
            }
        }
        Self { mat }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub phi: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl DecayParams {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        Self::with_bounds(phi, PHI_MIN, PHI_MAX)
    }

    pub fn with_bounds(phi: Vec<f64>, min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && max > min) {
            return Err(Error::Config(format!("bad decay bounds [{min}, {max}]")));
        }
        let d = Self { phi, min, max };
        if let Some(bad) = d.phi.iter().find(|p| !d.in_support(**p)) {
            return Err(Error::Config(format!(
                "decay {bad} outside [{min}, {max}]"
            )));
        }
        Ok(d)
    }

    pub fn in_support(&self, phi: f64) -> bool {
        phi >= self.min && phi <= self.max
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

pub fn exp_corr(h: f64, phi: f64) -> Result<f64> {
    if h < 0.0 {
        return Err(Error::NegativeDistance(h));
    }
    Ok((-phi * h).exp())
}

/// Cross-covariance matrix at separation `h` from raw loadings and decays.
pub fn cross_cov_raw(a: &DMatrix<f64>, phi: &[f64], h: f64) -> Result<DMatrix<f64>> {
    if a.ncols() != phi.len() {
        return Err(Error::Shape(format!(
            "{} factor columns but {} decays",
            a.ncols(),
            phi.len()
        )));
    }
    let mut scaled = a.clone();
    for (j, &p) in phi.iter().enumerate() {
        let c = exp_corr(h, p)?;
        scaled.column_mut(j).scale_mut(c);
    }
    // symmetrise explicitly so rounding cannot break C_rs = C_sr
    let c = &scaled * a.transpose();
    Ok((&c + c.transpose()) * 0.5)
}

pub fn cross_cov(a: &FactorLoadings, phi: &DecayParams, h: f64) -> Result<DMatrix<f64>> {
    cross_cov_raw(a.matrix(), &phi.phi, h)
}

/// `rho_rs(h) = C_rs(h) / sqrt(C_rr(0) C_ss(0))` over `h_grid`.
pub fn cross_corr_raw(
    a: &DMatrix<f64>,
    phi: &[f64],
    r: usize,
    s: usize,
    h_grid: &[f64],
) -> Result<Vec<f64>> {
    let (q, k) = a.shape();
    if k != phi.len() || r >= q || s >= q {
        return Err(Error::Shape(format!(
            "pair ({r}, {s}) with q={q}, k={k}, {} decays",
            phi.len()
        )));
    }
    let norm = |row: usize| -> Result<f64> {
        let v: f64 = (0..k).map(|j| a[(row, j)] * a[(row, j)]).sum();
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::DegenerateLoadings { row })
        }
    };
    let denom = (norm(r)? * norm(s)?).sqrt();
    h_grid
        .iter()
        .map(|&h| {
            if h < 0.0 {
                return Err(Error::NegativeDistance(h));
            }
            if r == s && h == 0.0 {
                return Ok(1.0);
            }
            let mut c = 0.0;
            for j in 0..k {
                c += a[(r, j)] * a[(s, j)] * (-phi[j] * h).exp();
            }
            Ok((c / denom).clamp(-1.0, 1.0))
        })
        .collect()
}

pub fn cross_corr(
    a: &FactorLoadings,
    phi: &DecayParams,
    r: usize,
    s: usize,
    h_grid: &[f64],
) -> Result<Vec<f64>> {
    cross_corr_raw(a.matrix(), &phi.phi, r, s, h_grid)
}

/// Gram matrix `exp(-phi |x_a - x_b|)` between two coordinate sets.
pub fn exp_gram(xa: &[[f64; 2]], xb: &[[f64; 2]], phi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(xa.len(), xb.len(), |i, j| {
        let dx = xa[i][0] - xb[j][0];
        let dy = xa[i][1] - xb[j][1];
        (-phi * (dx * dx + dy * dy).sqrt()).exp()
    })
}
