//! Discretised LGCP observation model.
//!
//! `W_i = 1 alpha_i' + X_i B + v_i A'` is the `n_px x q` log-intensity of
//! subject `i`; counts are Poisson with rate `exp(W)`. Masked pixels
//! contribute nothing to the likelihood or its gradient.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::kernel::{DecayParams, FactorLoadings};
use crate::preprocess::CountGrid;
use crate::{Error, Result};

/// Counts above this per pixel and type are rejected at ingestion.
pub const MAX_PIXEL_COUNT: u32 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub a: FactorLoadings,
    /// `p x q` covariate coefficients.
    pub b: DMatrix<f64>,
    /// One `q`-vector of offsets per subject.
    pub alpha: Vec<DVector<f64>>,
    pub phi: DecayParams,
}

impl ModelParams {
    pub fn q(&self) -> usize {
        self.a.q()
    }

    pub fn k(&self) -> usize {
        self.a.k()
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_subjects(&self) -> usize {
        self.alpha.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let q = self.q();
        if self.b.ncols() != q {
            return Err(Error::Shape(format!("B has {} columns, q = {q}", self.b.ncols())));
        }
        if self.alpha.iter().any(|a| a.len() != q) {
            return Err(Error::Shape("intercept vector length differs from q".into()));
        }
        if self.phi.len() != self.k() {
            return Err(Error::Shape(format!(
                "{} decays for k = {}",
                self.phi.len(),
                self.k()
            )));
        }
        Ok(())
    }
}

/// One `n_px x k` latent matrix per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFields {
    pub v: Vec<DMatrix<f64>>,
}

/// `1 alpha' + X B + v A'` for explicit components.
pub fn log_intensity_parts(
    alpha: &DVector<f64>,
    b: &DMatrix<f64>,
    a: &FactorLoadings,
    v: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = v.nrows();
    let mut w = v * a.matrix().transpose();
    if b.nrows() > 0 {
        w += x * b;
    }
    for mut row in w.row_iter_mut() {
        row += alpha.transpose();
    }
    debug_assert_eq!(w.nrows(), n);
    w
}

pub fn log_intensity(params: &ModelParams, i: usize, v_i: &DMatrix<f64>, x_i: &DMatrix<f64>) -> DMatrix<f64> {
    log_intensity_parts(&params.alpha[i], &params.b, &params.a, v_i, x_i)
}

pub fn ln_factorial(y: u32) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(f64::from(y) + 1.0)
    }
}

fn check(y: &CountGrid, w: &DMatrix<f64>) {
    assert_eq!(w.shape(), (y.n_px(), y.q), "log-intensity shape does not match counts");
}

/// Sum over observed cells of `y W - exp(W) - log y!`.
pub fn poisson_loglik(y: &CountGrid, w: &DMatrix<f64>) -> f64 {
    check(y, w);
    let mut total = 0.0;
    for p in 0..y.n_px() {
        if !y.mask[p] {
            continue;
        }
        for j in 0..y.q {
            let c = y.count(p, j);
            let wv = w[(p, j)];
            total += f64::from(c) * wv - wv.exp() - ln_factorial(c);
        }
    }
    total
}

/// Per-cell log-likelihood of observed cells, pixel-major then type.
pub fn pointwise_loglik(y: &CountGrid, w: &DMatrix<f64>, out: &mut Vec<f64>) {
    check(y, w);
    for p in 0..y.n_px() {
        if !y.mask[p] {
            continue;
        }
        for j in 0..y.q {
            let c = y.count(p, j);
            let wv = w[(p, j)];
            out.push(f64::from(c) * wv - wv.exp() - ln_factorial(c));
        }
    }
}

/// `y - exp(W)` on observed cells, zero on masked ones.
pub fn loglik_grad_w(y: &CountGrid, w: &DMatrix<f64>) -> DMatrix<f64> {
    check(y, w);
    DMatrix::from_fn(y.n_px(), y.q, |p, j| {
        if y.mask[p] {
            f64::from(y.count(p, j)) - w[(p, j)].exp()
        } else {
            0.0
        }
    })
}

/// Gradient with respect to the latent matrix: `G A`.
pub fn grad_latent(g: &DMatrix<f64>, a: &FactorLoadings) -> DMatrix<f64> {
    g * a.matrix()
}

/// Gradient with respect to the loadings, `sum_i G_i' v_i`, zero on
/// structural zeros.
pub fn grad_loadings(gs: &[DMatrix<f64>], vs: &[DMatrix<f64>], q: usize, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(q, k);
    for (g, v) in gs.iter().zip(vs) {
        out += g.transpose() * v;
    }
    for r in 0..q {
        for j in (r + 1)..k {
            out[(r, j)] = 0.0;
        }
    }
    out
}

/// Gradient with respect to `B`: `sum_i X_i' G_i`.
pub fn grad_coefficients(gs: &[DMatrix<f64>], xs: &[DMatrix<f64>], p: usize, q: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p, q);
    if p == 0 {
        return out;
    }
    for (g, x) in gs.iter().zip(xs) {
        out += x.transpose() * g;
    }
    out
}

/// Gradient with respect to one subject's offsets: column sums of `G`.
pub fn grad_intercepts(g: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum()))
}
