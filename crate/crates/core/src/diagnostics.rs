//! Posterior summaries: correlation curves with credible bands, group
//! differences, WAIC, bulk ESS, rank-normalised split R-hat and curve MAD.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::kernel::cross_corr_raw;
use crate::sampler::Counts;
use crate::{Error, Result};

pub const DEFAULT_H_POINTS: usize = 60;

/// One stored posterior draw. Matrices are flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iteration: usize,
    /// `q x k`.
    pub a: Vec<f64>,
    /// `p x q`.
    pub b: Vec<f64>,
    /// `n_subjects x q`.
    pub alpha: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Draw {
    pub fn loadings(&self, q: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(q, k, &self.a)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub phi_accept_rate: Vec<f64>,
    pub phi_whitened_accept_rate: Vec<f64>,
    pub row_accept_rate: Vec<f64>,
    pub latent_accept_rate: f64,
    pub alpha_accept_rate: f64,
    pub burn_phi_accept_rate: Vec<f64>,
    pub final_phi_log_sd: Vec<f64>,
    pub clamp_events: u64,
    pub nonfinite_events: u64,
}

fn rate(a: u64, n: u64) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        a as f64 / n as f64
    }
}

impl ChainSummary {
    pub fn from_counts(sampling: &Counts, burn: &Counts, phi_log_sd: &[f64]) -> Self {
        let rates = |a: &[u64], n: &[u64]| a.iter().zip(n).map(|(&a, &n)| rate(a, n)).collect();
        Self {
            phi_accept_rate: rates(&sampling.phi_accept, &sampling.phi_tries),
            phi_whitened_accept_rate: rates(&sampling.phi_whitened_accept, &sampling.phi_whitened_tries),
            row_accept_rate: rates(&sampling.row_accept, &sampling.row_tries),
            latent_accept_rate: rate(sampling.latent_accept, sampling.latent_tries),
            alpha_accept_rate: rate(sampling.alpha_accept, sampling.alpha_tries),
            burn_phi_accept_rate: rates(&burn.phi_accept, &burn.phi_tries),
            final_phi_log_sd: phi_log_sd.to_vec(),
            clamp_events: sampling.clamp_events + burn.clamp_events,
            nonfinite_events: sampling.nonfinite_events + burn.nonfinite_events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub chain: usize,
    pub draws: Vec<Draw>,
    /// Pointwise log-likelihood rows (draw-major), one per kept draw.
    pub loglik: Vec<Vec<f64>>,
    pub loglik_iterations: Vec<usize>,
    pub summary: ChainSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub seed: u64,
    pub config_hash: String,
    pub labels: Vec<String>,
    pub q: usize,
    pub k: usize,
    pub p: usize,
    pub n_subjects: usize,
    /// Microns per unit coordinate.
    pub l_star: f64,
    pub extent: (f64, f64),
    pub n_x: usize,
    pub n_y: usize,
    /// Observed cells per log-likelihood row.
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsStore {
    pub meta: StoreMeta,
    pub chains: Vec<ChainDraws>,
}

impl DrawsStore {
    /// All draws of all chains, chain after chain.
    pub fn all_draws(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// Pooled pointwise log-likelihood rows.
    pub fn loglik_rows(&self) -> Vec<&[f64]> {
        self.chains
            .iter()
            .flat_map(|c| c.loglik.iter().map(Vec::as_slice))
            .collect()
    }

    /// Unit-scale default distance grid for this store's domain.
    pub fn default_h_grid(&self) -> Vec<f64> {
        default_h_grid(self.meta.extent, DEFAULT_H_POINTS)
    }
}

/// `n` equally spaced distances from 0 to half the domain diagonal.
pub fn default_h_grid(extent: (f64, f64), n: usize) -> Vec<f64> {
    let half = 0.5 * extent.0.hypot(extent.1);
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| half * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub pair: (usize, usize),
    /// Distances in microns.
    pub h_microns: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    /// Draws excluded because a loadings row was zero.
    pub n_excluded: usize,
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarise(pair: (usize, usize), h_grid: &[f64], l_star: f64, curves: &[Vec<f64>], n_excluded: usize) -> Result<CorrelationCurve> {
    if curves.is_empty() {
        return Err(Error::TooFewDraws { need: 1, got: 0 });
    }
    let m = h_grid.len();
    let stats: Vec<(f64, f64, f64)> = (0..m)
        .into_par_iter()
        .map(|t| {
            let mut col: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.sort_by(f64::total_cmp);
            let lo = quantile_sorted(&col, 0.025);
            let hi = quantile_sorted(&col, 0.975);
            // rounding in the mean can stray outside the band by an ulp
            (mean.clamp(lo, hi), lo, hi)
        })
        .collect();
    Ok(CorrelationCurve {
        pair,
        h_microns: h_grid.iter().map(|h| h * l_star).collect(),
        mean: stats.iter().map(|s| s.0).collect(),
        lo95: stats.iter().map(|s| s.1).collect(),
        hi95: stats.iter().map(|s| s.2).collect(),
        n_excluded,
    })
}

/// Per-draw curves of pair `(r, s)`; draws with a zero loadings row give `None`.
fn draw_curves(store: &DrawsStore, pair: (usize, usize), h_grid: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let (q, k) = (store.meta.q, store.meta.k);
    if pair.0 >= q || pair.1 >= q {
        return Err(Error::Shape(format!("pair {pair:?} with q = {q}")));
    }
    let draws: Vec<&Draw> = store.all_draws().collect();
    draws
        .par_iter()
        .map(|d| match cross_corr_raw(&d.loadings(q, k), &d.phi, pair.0, pair.1, h_grid) {
            Ok(c) => Ok(Some(c)),
            Err(Error::DegenerateLoadings { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Pointwise posterior mean and central 95% band of `rho_rs` over `h_grid`
/// (unit-scale distances). Correlations are unchanged by sign flips and
/// permutations of factor columns, so draws need no alignment.
pub fn xcorr_summary(store: &DrawsStore, pair: (usize, usize), h_grid: &[f64]) -> Result<CorrelationCurve> {
    let per_draw = draw_curves(store, pair, h_grid)?;
    let n_excluded = per_draw.iter().filter(|c| c.is_none()).count();
    let kept: Vec<Vec<f64>> = per_draw.into_iter().flatten().collect();
    summarise(pair, h_grid, store.meta.l_star, &kept, n_excluded)
}

/// Summary of `rho^A - rho^B`, pairing draws by index and cycling the shorter store.
pub fn diff_curves(a: &DrawsStore, b: &DrawsStore, pair: (usize, usize), h_grid: &[f64]) -> Result<CorrelationCurve> {
    if a.meta.labels != b.meta.labels {
        return Err(Error::LabelMismatch);
    }
    let ca = draw_curves(a, pair, h_grid)?;
    let cb = draw_curves(b, pair, h_grid)?;
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::TooFewDraws {
            need: 1,
            got: ca.len().min(cb.len()),
        });
    }
    let n = ca.len().max(cb.len());
    let mut excluded = 0;
    let mut diffs = Vec::with_capacity(n);
    for t in 0..n {
        match (&ca[t % ca.len()], &cb[t % cb.len()]) {
            (Some(x), Some(y)) => diffs.push(x.iter().zip(y).map(|(x, y)| x - y).collect()),
            _ => excluded += 1,
        }
    }
    summarise(pair, h_grid, a.meta.l_star, &diffs, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub lppd: f64,
    pub p_waic: f64,
    pub waic: f64,
}

/// WAIC from an `S x n_obs` pointwise log-likelihood table (rows are draws).
pub fn waic<R: AsRef<[f64]> + Sync>(loglik: &[R]) -> Result<Waic> {
    let s = loglik.len();
    if s < 2 {
        return Err(Error::TooFewDraws { need: 2, got: s });
    }
    let n_obs = loglik[0].as_ref().len();
    for row in loglik {
        let row = row.as_ref();
        if row.len() != n_obs {
            return Err(Error::LengthMismatch {
                left: n_obs,
                right: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pointwise log-likelihood".into()));
        }
    }
    let terms: Vec<(f64, f64)> = (0..n_obs)
        .into_par_iter()
        .map(|o| {
            let col: Vec<f64> = loglik.iter().map(|r| r.as_ref()[o]).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lme = max + (col.iter().map(|v| (v - max).exp()).sum::<f64>() / s as f64).ln();
            let mean = col.iter().sum::<f64>() / s as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
            (lme, var)
        })
        .collect();
    let lppd: f64 = terms.iter().map(|t| t.0).sum();
    let p_waic: f64 = terms.iter().map(|t| t.1).sum();
    Ok(Waic {
        lppd,
        p_waic,
        waic: -2.0 * (lppd - p_waic),
    })
}

const MIN_DRAWS: usize = 100;

fn check_chains<C: AsRef<[f64]>>(chains: &[C]) -> Result<usize> {
    let first = chains.first().ok_or(Error::TooFewDraws { need: MIN_DRAWS, got: 0 })?;
    let n = first.as_ref().len();
    if n < MIN_DRAWS {
        return Err(Error::TooFewDraws { need: MIN_DRAWS, got: n });
    }
    for c in chains {
        let c = c.as_ref();
        if c.len() != n {
            return Err(Error::LengthMismatch { left: n, right: c.len() });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("chain draw".into()));
        }
    }
    let x0 = first.as_ref()[0];
    if chains.iter().all(|c| c.as_ref().iter().all(|&v| v == x0)) {
        return Err(Error::ConstantChain);
    }
    Ok(n)
}

/// Splits every chain into halves (dropping a middle draw when odd).
fn split<C: AsRef<[f64]>>(chains: &[C]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = c.as_ref();
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Normal scores `Phi^-1((rank - 3/8) / (S + 1/4))` of the pooled draws,
/// ties sharing their average rank.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(usize, usize)> = Vec::new();
    for (c, ch) in chains.iter().enumerate() {
        for t in 0..ch.len() {
            idx.push((c, t));
        }
    }
    let total = idx.len();
    idx.sort_by(|a, b| chains[a.0][a.1].total_cmp(&chains[b.0][b.1]));
    let std_normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < total {
        let v = chains[idx[i].0][idx[i].1];
        let mut j = i;
        while j + 1 < total && chains[idx[j + 1].0][idx[j + 1].1] == v {
            j += 1;
        }
        // ranks are 1-based: positions i..=j share (i + j)/2 + 1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = std_normal.inverse_cdf((rank - 0.375) / (total as f64 + 0.25));
        for &(c, t) in &idx[i..=j] {
            out[c][t] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Biased autocovariance at lags `0..n`.
fn autocov(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..n)
        .map(|lag| d[..n - lag].iter().zip(&d[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b = n * var(&means);
    let w = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn ess_of(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocov(c)).collect();
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = mean(&acov.iter().map(|a| a[0]).collect::<Vec<_>>()) * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += var(&chain_means);
    }
    let rho = |t: usize| -> f64 {
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };
    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    rho_hat[1] = rho(1);
    let mut t = 1;
    // Geyer initial positive sequence over pairs of lags
    while t + 2 < n {
        let r1 = rho(t + 1);
        let r2 = rho(t + 2);
        if r1 + r2 < 0.0 {
            break;
        }
        rho_hat[t + 1] = r1;
        rho_hat[t + 2] = r2;
        t += 2;
    }
    let max_t = t;
    // initial monotone: each pair sum no larger than the previous one
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let sum: f64 = rho_hat[..=max_t].iter().sum();
    let mut tau = -1.0 + 2.0 * sum;
    // for antithetic chains the estimate is capped at S log10(S)
    tau = tau.max(1.0 / total.log10());
    total / tau
}

/// Rank-normalised bulk ESS over split chains.
pub fn bulk_ess<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    check_chains(chains)?;
    Ok(ess_of(&rank_normalize(&split(chains))))
}

/// Rank-normalised split R-hat: the larger of the bulk and folded versions.
pub fn rhat<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split(chains);
    let bulk = split_rhat(&rank_normalize(&halves));
    let pooled: Vec<f64> = halves.iter().flatten().copied().collect();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let med = quantile_sorted(&sorted, 0.5);
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let folded_rhat = if folded.iter().flatten().all(|&v| v == folded[0][0]) {
        f64::NAN
    } else {
        split_rhat(&rank_normalize(&folded))
    };
    Ok(bulk.max(folded_rhat))
}

/// Median over the grid of `|fitted - truth|`.
pub fn mad_curves(fitted: &[f64], truth: &[f64]) -> Result<f64> {
    if fitted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: fitted.len(),
            right: truth.len(),
        });
    }
    if fitted.is_empty() {
        return Err(Error::TooFewDraws { need: 1, got: 0 });
    }
    let mut d: Vec<f64> = fitted.iter().zip(truth).map(|(a, b)| (a - b).abs()).collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    })
}

/// Cross pairs `(r, s)` with `r < s`.
pub fn cross_pairs(q: usize) -> Vec<(usize, usize)> {
    (0..q).flat_map(|r| (r + 1..q).map(move |s| (r, s))).collect()
}

/// Median absolute deviation pooled over the grid and all cross pairs
/// between posterior-mean curves and the curves implied by `(a, phi)`.
pub fn aggregate_mad(store: &DrawsStore, a_true: &DMatrix<f64>, phi_true: &[f64], h_grid: &[f64]) -> Result<f64> {
    let mut fitted = Vec::new();
    let mut truth = Vec::new();
    for pair in cross_pairs(store.meta.q) {
        fitted.extend(xcorr_summary(store, pair, h_grid)?.mean);
        truth.extend(cross_corr_raw(a_true, phi_true, pair.0, pair.1, h_grid)?);
    }
    mad_curves(&fitted, &truth)
}

/// Per-chain scalar trajectories of `rho_rs(h)`.
pub fn curve_chains(store: &DrawsStore, pair: (usize, usize), h: f64) -> Result<Vec<Vec<f64>>> {
    let (q, k) = (store.meta.q, store.meta.k);
    store
        .chains
        .iter()
        .map(|c| {
            c.draws
                .iter()
                .map(|d| Ok(cross_corr_raw(&d.loadings(q, k), &d.phi, pair.0, pair.1, &[h])?[0]))
                .collect()
        })
        .collect()
}
