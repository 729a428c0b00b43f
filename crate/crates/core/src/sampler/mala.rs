//! Preconditioned Metropolis-adjusted Langevin steps.
//!
//! With preconditioner `M` (a fixed covariance-like matrix) and step `eps`:
//!
//! ```text
//! mu(x) = x + eps^2/2 M grad log pi(x)
//! x'    = mu(x) + eps M^{1/2} z
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Fixed preconditioner. All operations act on flat coordinate vectors.
pub trait Preconditioner {
    /// `M g`.
    fn apply(&self, g: &DVector<f64>) -> DVector<f64>;
    /// A draw from `N(0, M)` given standard normals `z`.
    fn noise(&self, z: &DVector<f64>) -> DVector<f64>;
    /// `d' M^-1 d`.
    fn inv_quad(&self, d: &DVector<f64>) -> f64;
}

pub struct Identity;

impl Preconditioner for Identity {
    fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        g.clone()
    }
    fn noise(&self, z: &DVector<f64>) -> DVector<f64> {
        z.clone()
    }
    fn inv_quad(&self, d: &DVector<f64>) -> f64 {
        d.norm_squared()
    }
}

/// `M = diag(scale^2)`.
pub struct Diagonal<'a>(pub &'a [f64]);

impl Preconditioner for Diagonal<'_> {
    fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(g.len(), |i, _| g[i] * self.0[i] * self.0[i])
    }
    fn noise(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| z[i] * self.0[i])
    }
    fn inv_quad(&self, d: &DVector<f64>) -> f64 {
        d.iter().zip(self.0).map(|(x, s)| (x / s) * (x / s)).sum()
    }
}

/// Block-diagonal `M = blockdiag(Q_b^-1)` from lower Cholesky factors `L_b`
/// of the precisions `Q_b = L_b L_b'`, in order along the flat vector.
pub struct BlockPrecision<'a>(pub Vec<&'a DMatrix<f64>>);

impl BlockPrecision<'_> {
    fn each(&self, x: &DVector<f64>, mut f: impl FnMut(&DMatrix<f64>, DVector<f64>) -> DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        let mut off = 0;
        for l in &self.0 {
            let n = l.nrows();
            let seg = x.rows(off, n).into_owned();
            out.rows_mut(off, n).copy_from(&f(l, seg));
            off += n;
        }
        out
    }
}

impl Preconditioner for BlockPrecision<'_> {
    fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        self.each(g, |l, mut s| {
            l.solve_lower_triangular_mut(&mut s);
            l.tr_solve_lower_triangular_mut(&mut s);
            s
        })
    }
    fn noise(&self, z: &DVector<f64>) -> DVector<f64> {
        self.each(z, |l, mut s| {
            l.tr_solve_lower_triangular_mut(&mut s);
            s
        })
    }
    fn inv_quad(&self, d: &DVector<f64>) -> f64 {
        self.each(d, |l, s| l.transpose() * s).norm_squared()
    }
}

/// Everything about one transition, enough to recompute the acceptance.
#[derive(Debug, Clone)]
pub struct MalaStep {
    pub accepted: bool,
    pub accept_prob: f64,
    pub proposal: DVector<f64>,
    pub logp_current: f64,
    pub logp_proposal: f64,
    /// `log q(x' | x)` up to the shared normalising constant.
    pub log_q_forward: f64,
    /// `log q(x | x')`.
    pub log_q_reverse: f64,
    /// The proposal was rejected because the target refused it (clamp or
    /// non-finite value).
    pub refused: bool,
}

fn log_q<P: Preconditioner>(to: &DVector<f64>, from: &DVector<f64>, grad_from: &DVector<f64>, eps: f64, m: &P) -> f64 {
    let mean = from + m.apply(grad_from) * (0.5 * eps * eps);
    -m.inv_quad(&(to - mean)) / (2.0 * eps * eps)
}

/// One MALA transition from `x`. `target` returns the log-density and its
/// gradient, or `None` to refuse a point. Returns `None` when the current
/// point itself is refused.
pub fn mala_step<P, F, R>(x: &DVector<f64>, eps: f64, m: &P, mut target: F, rng: &mut R) -> Option<MalaStep>
where
    P: Preconditioner,
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    R: Rng + ?Sized,
{
    let (lp, grad) = target(x)?;
    if eps == 0.0 {
        return Some(MalaStep {
            accepted: true,
            accept_prob: 1.0,
            proposal: x.clone(),
            logp_current: lp,
            logp_proposal: lp,
            log_q_forward: 0.0,
            log_q_reverse: 0.0,
            refused: false,
        });
    }
    let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let proposal = x + m.apply(&grad) * (0.5 * eps * eps) + m.noise(&z) * eps;
    let u: f64 = rng.random();
    let refused_step = |proposal: DVector<f64>| MalaStep {
        accepted: false,
        accept_prob: 0.0,
        proposal,
        logp_current: lp,
        logp_proposal: f64::NEG_INFINITY,
        log_q_forward: f64::NAN,
        log_q_reverse: f64::NAN,
        refused: true,
    };
    let Some((lp_new, grad_new)) = target(&proposal) else {
        return Some(refused_step(proposal));
    };
    if !lp_new.is_finite() || grad_new.iter().any(|g| !g.is_finite()) {
        return Some(refused_step(proposal));
    }
    let fwd = log_q(&proposal, x, &grad, eps, m);
    let rev = log_q(x, &proposal, &grad_new, eps, m);
    let log_ratio = lp_new - lp + rev - fwd;
    let accept_prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
    Some(MalaStep {
        accepted: u < accept_prob,
        accept_prob,
        proposal,
        logp_current: lp,
        logp_proposal: lp_new,
        log_q_forward: fwd,
        log_q_reverse: rev,
        refused: false,
    })
}

/// Robbins-Monro update of a log step size toward a target acceptance rate.
pub fn adapt_log_step(step: &mut f64, accept_prob: f64, target: f64, iteration: usize) {
    let gain = (iteration as f64 + 1.0).powf(-0.6);
    let log_step = step.ln() + gain * (accept_prob - target);
    *step = log_step.clamp(-20.0, 10.0).exp();
}
