//! Moves along directions that leave every log-intensity unchanged.
//!
//! Shifting factor `r` of subject `i` by a constant while moving the offsets
//! by `A c`, or rescaling a loadings column against its latent fields, keeps
//! `W` fixed, so only prior terms enter. The posterior mixes slowly along
//! exactly these directions under one-block-at-a-time updates. Both moves draw
//! the group element from its conditional (generalised Gibbs), which leaves
//! the posterior invariant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{ChainState, Sampler};
use crate::kernel::FactorLoadings;
use crate::meshedgp;
use crate::rng::{keyed, Stream};

/// Whitened `L_s^-1 (x_s - H_s x_[s])` stacked over blocks.
fn whitened(x: &[f64], sampler: &Sampler<'_>, factors: &meshedgp::BlockFactors) -> Vec<f64> {
    meshedgp::whiten(x, factors, &sampler.mesh)
}

impl Sampler<'_> {
    fn mesh_indicator(&self) -> Vec<f64> {
        let mut ones = vec![0.0; self.mesh.n_px()];
        for b in self.mesh.blocks() {
            for &p in b {
                ones[p] = 1.0;
            }
        }
        ones
    }

    /// Precision and linear term of the Gaussian conditional of the shift
    /// `c`, one linear term per subject.
    pub(crate) fn shift_conditional(&self, state: &ChainState) -> (DMatrix<f64>, Vec<DVector<f64>>) {
        let k = self.k();
        let n_px = self.mesh.n_px();
        let ones = self.mesh_indicator();
        let e1: Vec<Vec<f64>> = (0..k)
            .map(|r| whitened(&ones, self, &state.caches[r].factors))
            .collect();
        let a = state.params.a.matrix();
        let pv = self.config.prior_var;
        let mut prec = a.transpose() * a / pv;
        for r in 0..k {
            prec[(r, r)] += e1[r].iter().map(|x| x * x).sum::<f64>();
        }
        let lins = state
            .latents
            .v
            .par_iter()
            .zip(state.params.alpha.par_iter())
            .map(|(v, alpha)| {
                let mut lin = -(a.transpose() * alpha) / pv;
                for r in 0..k {
                    let col = &v.as_slice()[r * n_px..(r + 1) * n_px];
                    let ev = whitened(col, self, &state.caches[r].factors);
                    lin[r] += ev.iter().zip(&e1[r]).map(|(x, y)| x * y).sum::<f64>();
                }
                lin
            })
            .collect();
        (prec, lins)
    }

    /// Draws `c` from its conditional and applies `v_i <- v_i - 1 c'`,
    /// `alpha_i <- alpha_i + A c` for every subject.
    pub fn update_offset_shifts(&self, state: &mut ChainState) {
        let k = self.k();
        let (prec, lins) = self.shift_conditional(state);
        let Some(chol) = prec.cholesky() else {
            return;
        };
        let l = chol.l();
        let (seed, chain, it) = (self.config.seed, state.chain, state.iteration);
        let shifts: Vec<DVector<f64>> = lins
            .iter()
            .enumerate()
            .map(|(i, lin)| {
                let mut rng = keyed(seed, Stream::OffsetShift, &[chain as u64, it as u64, i as u64]);
                let mut z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                l.tr_solve_lower_triangular_mut(&mut z);
                chol.solve(lin) + z
            })
            .collect();
        let ones = self.mesh_indicator();
        let a = state.params.a.matrix().clone();
        for ((v, alpha), c) in state.latents.v.iter_mut().zip(state.params.alpha.iter_mut()).zip(&shifts) {
            for r in 0..k {
                for (p, one) in ones.iter().enumerate() {
                    if *one > 0.0 {
                        v[(p, r)] -= c[r];
                    }
                }
            }
            *alpha += &a * c;
        }
    }

    /// `(sum of squared whitened fields, |A_r|^2 / prior_var, free loadings
    /// minus latent dimension)` for factor `r`. With `tau = log t` the
    /// conditional is `-quad e^{-2 tau} / 2 - a_sq e^{2 tau} / 2 + dim tau`.
    pub(crate) fn scale_terms(&self, r: usize, state: &ChainState) -> (f64, f64, f64) {
        let n_px = self.mesh.n_px();
        let quad: f64 = state
            .latents
            .v
            .par_iter()
            .map(|v| {
                let col = &v.as_slice()[r * n_px..(r + 1) * n_px];
                whitened(col, self, &state.caches[r].factors)
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
            })
            .sum();
        let a_sq = state.params.a.matrix().column(r).norm_squared() / self.config.prior_var;
        let m = (0..self.q()).filter(|&j| FactorLoadings::is_free(j, r)).count() as f64;
        let n_latent: usize = self.mesh.blocks().iter().map(Vec::len).sum();
        (quad, a_sq, m - (n_latent * self.n()) as f64)
    }

    /// Rescales loadings column `r` by `t` and the fields of factor `r` by
    /// `1/t`, with `log t` drawn by an independence Metropolis step from a
    /// Laplace approximation of its conditional.
    pub fn update_factor_scale(&self, r: usize, state: &mut ChainState) {
        let (quad, a_sq, dim) = self.scale_terms(r, state);
        if !(quad > 0.0) || dim >= 0.0 {
            return;
        }
        // log density of tau = log t, up to a constant
        let logp = |tau: f64| -0.5 * quad * (-2.0 * tau).exp() - 0.5 * a_sq * (2.0 * tau).exp() + dim * tau;
        let grad = |tau: f64| quad * (-2.0 * tau).exp() - a_sq * (2.0 * tau).exp() + dim;
        let hess = |tau: f64| -2.0 * quad * (-2.0 * tau).exp() - 2.0 * a_sq * (2.0 * tau).exp();
        // concave in tau; start from the root without the loadings term
        let mut mode = 0.5 * (quad / -dim).ln();
        for _ in 0..50 {
            let step = grad(mode) / hess(mode);
            mode -= step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        let sd = (-1.0 / hess(mode)).sqrt();
        let mut rng = keyed(
            self.config.seed,
            Stream::FactorScale,
            &[state.chain as u64, state.iteration as u64, r as u64],
        );
        let z: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let prop = mode + sd * z;
        let logq = |tau: f64| -0.5 * ((tau - mode) / sd).powi(2);
        // the current state is tau = 0
        let log_ratio = logp(prop) - logp(0.0) + logq(0.0) - logq(prop);
        if !(u.ln() < log_ratio) {
            return;
        }
        let t = prop.exp();
        for j in 0..self.q() {
            if FactorLoadings::is_free(j, r) {
                let x = state.params.a.get(j, r);
                state.params.a.set(j, r, x * t).expect("free loading");
            }
        }
        for v in &mut state.latents.v {
            v.column_mut(r).scale_mut(1.0 / t);
        }
    }
}
