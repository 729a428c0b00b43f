//! Metropolis-within-Gibbs sampler for the multi-subject model.
//!
//! One iteration runs, in order:
//! 1. a joint MALA step on `F_j = (B_.j, free part of A_j.)` for each type `j`,
//! 2. a log-scale random-walk Hastings step on each decay `phi_r` given the
//!    latent fields, optionally followed by a second one that holds the
//!    whitened fields fixed instead,
//! 3. a MALA step on every latent block of every subject, then (with
//!    `group_moves`) a rescaling of each factor column against its fields
//!    and an exact Gibbs shift of field means into the offsets,
//! 4. a MALA step on each subject's offsets `alpha_i`.
//!
//! Every update draws from a stream keyed by `(seed, chain, iteration, ids)`,
//! so results do not depend on the number of worker threads. Step sizes adapt
//! during burn-in only.

mod group;
pub mod mala;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ChainDraws, ChainSummary, Draw, DrawsStore, StoreMeta};
use crate::io::config_hash;
use crate::kernel::{DecayParams, FactorLoadings};
use crate::likelihood::{pointwise_loglik, LatentFields, ModelParams, log_intensity};
use crate::meshedgp::{self, build_mesh, compute_factors, conditional_precision_chols, BlockFactors, MeshGraph};
use crate::preprocess::{CountGrid, GridSpec};
use crate::rng::{keyed, Stream};
use crate::{Error, Result};

use mala::{adapt_log_step, mala_step, BlockPrecision, Diagonal};

/// Proposals pushing any log-intensity above this are rejected.
pub const W_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    /// Pointwise log-likelihood is kept for every `loglik_thin`-th stored
    /// draw; 0 disables it.
    pub loglik_thin: usize,
    pub seed: u64,
    pub k: usize,
    pub tile: (usize, usize),
    pub target_accept_phi: f64,
    pub target_accept_mala: f64,
    /// Prior variance of `F_j` entries and of the offsets.
    pub prior_var: f64,
    pub phi_bounds: (f64, f64),
    pub init_phi: f64,
    pub init_phi_log_sd: f64,
    /// Remove pixels missing in every image from the mesh instead of
    /// sampling them from the prior.
    pub drop_missing: bool,
    /// Follow each decay update with a move that keeps the whitened latent
    /// innovations fixed, so the fields rescale with `phi`.
    pub whitened_phi: bool,
    /// Joint offset/field shifts and loadings/field rescalings that leave
    /// the log-intensity unchanged.
    pub group_moves: bool,
    pub chains: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iter: 4000,
            n_burn: 2000,
            thin: 1,
            loglik_thin: 1,
            seed: 1,
            k: 2,
            tile: (5, 5),
            target_accept_phi: 0.44,
            target_accept_mala: 0.57,
            prior_var: 1e3,
            phi_bounds: (crate::kernel::PHI_MIN, crate::kernel::PHI_MAX),
            init_phi: 1.0,
            init_phi_log_sd: 0.2,
            drop_missing: false,
            whitened_phi: true,
            group_moves: true,
            chains: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_burn >= self.n_iter {
            return bad(format!("n_burn {} must be < n_iter {}", self.n_burn, self.n_iter));
        }
        if self.thin == 0 {
            return bad("thin must be >= 1".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.tile.0 == 0 || self.tile.1 == 0 {
            return bad(format!("tile {:?} must be at least 1x1", self.tile));
        }
        for (name, t) in [("phi", self.target_accept_phi), ("mala", self.target_accept_mala)] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("target acceptance for {name} must lie in (0, 1)"));
            }
        }
        if !(self.prior_var > 0.0) {
            return bad("prior_var must be positive".into());
        }
        let (lo, hi) = self.phi_bounds;
        if !(lo > 0.0 && hi > lo) {
            return bad(format!("phi bounds {:?} invalid", self.phi_bounds));
        }
        if !(self.init_phi >= lo && self.init_phi <= hi) {
            return bad(format!("init_phi {} outside bounds", self.init_phi));
        }
        if !(self.init_phi_log_sd > 0.0) {
            return bad("init_phi_log_sd must be positive".into());
        }
        if self.chains == 0 {
            return bad("chains must be >= 1".into());
        }
        Ok(())
    }

    /// Number of draws kept per chain.
    pub fn n_stored(&self) -> usize {
        (self.n_iter - self.n_burn).div_ceil(self.thin)
    }
}

/// Count grids of one group plus optional covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grids: Vec<CountGrid>,
    /// `n_px x p` per subject; `p = 0` for intercept-only models.
    pub covariates: Vec<DMatrix<f64>>,
    pub labels: Vec<String>,
    /// Microns per unit coordinate.
    pub l_star: f64,
}

impl Dataset {
    pub fn new(grids: Vec<CountGrid>, labels: Vec<String>) -> Result<Self> {
        let covariates = grids.iter().map(|g| DMatrix::zeros(g.n_px(), 0)).collect();
        let l_star = grids.first().map_or(1.0, |g| g.grid.scale);
        let d = Self {
            grids,
            covariates,
            labels,
            l_star,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_covariates(mut self, covariates: Vec<DMatrix<f64>>) -> Result<Self> {
        self.covariates = covariates;
        self.validate()?;
        Ok(self)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grids[0].grid
    }

    pub fn q(&self) -> usize {
        self.grids[0].q
    }

    pub fn p(&self) -> usize {
        self.covariates[0].ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.grids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.grids.first().ok_or(Error::EmptyDataset)?;
        if first.q == 0 {
            return Err(Error::Config("no cell types".into()));
        }
        if self.labels.len() != first.q {
            return Err(Error::Shape(format!(
                "{} labels for {} types",
                self.labels.len(),
                first.q
            )));
        }
        for g in &self.grids {
            if g.grid != first.grid {
                return Err(Error::Config(format!(
                    "image {} uses a different grid than {}",
                    g.image_id, first.image_id
                )));
            }
            if g.q != first.q || g.counts.len() != g.n_px() * g.q || g.mask.len() != g.n_px() {
                return Err(Error::Shape(format!("image {} has inconsistent shapes", g.image_id)));
            }
        }
        if self.covariates.len() != self.grids.len() {
            return Err(Error::Shape("one covariate matrix per image required".into()));
        }
        let p = self.covariates[0].ncols();
        if self
            .covariates
            .iter()
            .any(|x| x.ncols() != p || x.nrows() != first.n_px())
        {
            return Err(Error::Shape("covariate matrices must all be n_px x p".into()));
        }
        Ok(())
    }
}

/// Observation family used by the loadings/coefficient update. `Gaussian`
/// exists to check that update against the closed-form conjugate posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Poisson,
    Gaussian { sd: f64 },
}

/// H/R factors of one latent factor plus the per-block Cholesky factors of
/// the prior full-conditional precision (the latent MALA preconditioner).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorCache {
    pub factors: BlockFactors,
    pub precision: Vec<DMatrix<f64>>,
}

impl FactorCache {
    pub fn new(mesh: &MeshGraph, coords: &[[f64; 2]], phi: f64) -> Result<Self> {
        Self::from_factors(mesh, compute_factors(mesh, coords, phi)?)
    }

    pub fn from_factors(mesh: &MeshGraph, factors: BlockFactors) -> Result<Self> {
        let precision = conditional_precision_chols(mesh, &factors)?;
        Ok(Self { factors, precision })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub phi_accept: Vec<u64>,
    pub phi_tries: Vec<u64>,
    pub phi_whitened_accept: Vec<u64>,
    pub phi_whitened_tries: Vec<u64>,
    pub row_accept: Vec<u64>,
    pub row_tries: Vec<u64>,
    pub latent_accept: u64,
    pub latent_tries: u64,
    pub alpha_accept: u64,
    pub alpha_tries: u64,
    /// Proposals refused because a log-intensity exceeded the clamp.
    pub clamp_events: u64,
    /// Proposals refused for non-finite values or failed factorisations.
    pub nonfinite_events: u64,
}

impl Counts {
    fn new(q: usize, k: usize) -> Self {
        Self {
            phi_accept: vec![0; k],
            phi_tries: vec![0; k],
            phi_whitened_accept: vec![0; k],
            phi_whitened_tries: vec![0; k],
            row_accept: vec![0; q],
            row_tries: vec![0; q],
            ..Default::default()
        }
    }

    fn absorb(&mut self, o: &BlockTally) {
        self.latent_accept += o.accept;
        self.latent_tries += o.tries;
        self.clamp_events += o.clamp;
        self.nonfinite_events += o.nonfinite;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub phi_log_sd: Vec<f64>,
    pub phi_whitened_log_sd: Vec<f64>,
    pub row_step: Vec<f64>,
    /// Per subject, per block.
    pub latent_step: Vec<Vec<f64>>,
    pub alpha_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub params: ModelParams,
    pub latents: LatentFields,
    pub caches: Vec<FactorCache>,
    pub adapt: Adaptation,
    pub iteration: usize,
    pub chain: usize,
    pub burn_counts: Counts,
    pub counts: Counts,
}

impl ChainState {
    fn counts_mut(&mut self, burn: bool) -> &mut Counts {
        if burn {
            &mut self.burn_counts
        } else {
            &mut self.counts
        }
    }
}

/// Which updates a sweep performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Updates {
    pub rows: bool,
    pub phi: bool,
    pub latent: bool,
    pub intercepts: bool,
}

impl Updates {
    pub const ALL: Updates = Updates {
        rows: true,
        phi: true,
        latent: true,
        intercepts: true,
    };
}

#[derive(Debug, Default, Clone, Copy)]
struct BlockTally {
    accept: u64,
    tries: u64,
    clamp: u64,
    nonfinite: u64,
}

/// Outcome of one scalar or block update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub accept_prob: f64,
    pub refused: bool,
}

impl StepOutcome {
    const SKIPPED: StepOutcome = StepOutcome {
        accepted: false,
        accept_prob: 0.0,
        refused: true,
    };
}

/// Solution of the Gaussian-regression conjugate update:
/// `Sigma = (V^-1 + X'X/d^2)^-1`, `mu = Sigma X'y / d^2`.
pub fn conjugate_gaussian_update(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    d: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = x.ncols();
    if x.nrows() != y.len() || prior_cov.shape() != (m, m) {
        return Err(Error::Shape("conjugate update dimensions".into()));
    }
    if !(d > 0.0) {
        return Err(Error::Config(format!("noise sd {d} must be positive")));
    }
    let prior_prec = prior_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("prior covariance not SPD".into()))?
        .inverse();
    let d2 = d * d;
    let post_prec = prior_prec + x.transpose() * x / d2;
    let chol = post_prec
        .cholesky()
        .ok_or_else(|| Error::Singular("posterior precision not SPD".into()))?;
    let sigma = chol.inverse();
    let mu = &sigma * (x.transpose() * y) / d2;
    Ok((mu, sigma))
}

/// The sampler for one dataset and configuration.
pub struct Sampler<'a> {
    data: &'a Dataset,
    config: SamplerConfig,
    mesh: MeshGraph,
    coords: Vec<[f64; 2]>,
    family: Family,
    /// Per type, `1/sqrt(total count + 1)`: diagonal preconditioner scale of
    /// the row and offset updates.
    type_scale: Vec<f64>,
    /// Per subject and type.
    alpha_scale: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let q = data.q();
        if config.k > q {
            return Err(Error::Config(format!("k = {} exceeds q = {q}", config.k)));
        }
        let grid = data.grid();
        let mut mesh = build_mesh(grid, config.tile)?;
        if config.drop_missing {
            let any_observed: Vec<bool> = (0..grid.n_px())
                .map(|p| data.grids.iter().any(|g| g.mask[p]))
                .collect();
            mesh = mesh.restrict(&any_observed)?;
        }
        let coords = grid.unit_coords();
        let mut totals = vec![0u64; q];
        let mut alpha_scale = Vec::with_capacity(data.n_subjects());
        for g in &data.grids {
            for c in g.counts.iter() {
                if *c > crate::likelihood::MAX_PIXEL_COUNT {
                    return Err(Error::Config(format!(
                        "image {}: count {c} per pixel is implausible",
                        g.image_id
                    )));
                }
            }
            let t = g.observed_totals();
            for j in 0..q {
                totals[j] += t[j];
            }
            alpha_scale.push(t.iter().map(|&c| 1.0 / (c as f64 + 1.0).sqrt()).collect());
        }
        let type_scale = totals.iter().map(|&c| 1.0 / (c as f64 + 1.0).sqrt()).collect();
        Ok(Self {
            data,
            config,
            mesh,
            coords,
            family: Family::Poisson,
            type_scale,
            alpha_scale,
        })
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn mesh(&self) -> &MeshGraph {
        &self.mesh
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    fn q(&self) -> usize {
        self.data.q()
    }

    fn k(&self) -> usize {
        self.config.k
    }

    fn n(&self) -> usize {
        self.data.n_subjects()
    }

    fn burning(&self, state: &ChainState) -> bool {
        state.iteration < self.config.n_burn
    }

    /// Initial state: data-informed offsets, diagonal loadings 0.5, `B = 0`,
    /// `v = 0`, all decays at `init_phi`.
    pub fn init_state(&self, chain: usize) -> Result<ChainState> {
        let (q, k, n) = (self.q(), self.k(), self.n());
        let n_px = self.data.grid().n_px();
        let mut a = FactorLoadings::zeros(q, k)?;
        for j in 0..k {
            a.set(j, j, 0.5)?;
        }
        let alpha = self
            .data
            .grids
            .iter()
            .map(|g| {
                let n_obs = g.n_observed().max(1) as f64;
                let t = g.observed_totals();
                DVector::from_fn(q, |j, _| (t[j] as f64 / n_obs + 1.0 / n_px as f64).ln())
            })
            .collect();
        let (lo, hi) = self.config.phi_bounds;
        let phi = DecayParams::with_bounds(vec![self.config.init_phi; k], lo, hi)?;
        let params = ModelParams {
            a,
            b: DMatrix::zeros(self.data.p(), q),
            alpha,
            phi,
        };
        let cache = FactorCache::new(&self.mesh, &self.coords, self.config.init_phi)?;
        let m = self.mesh.n_blocks();
        Ok(ChainState {
            params,
            latents: LatentFields {
                v: vec![DMatrix::zeros(n_px, k); n],
            },
            caches: vec![cache; k],
            adapt: Adaptation {
                phi_log_sd: vec![self.config.init_phi_log_sd; k],
                phi_whitened_log_sd: vec![self.config.init_phi_log_sd; k],
                row_step: vec![0.5; q],
                latent_step: vec![vec![0.5; m]; n],
                alpha_step: vec![0.5; n],
            },
            iteration: 0,
            chain,
            burn_counts: Counts::new(q, k),
            counts: Counts::new(q, k),
        })
    }

    fn rng(&self, state: &ChainState, stream: Stream, ids: &[u64]) -> rand_chacha::ChaCha8Rng {
        let mut key = vec![state.chain as u64, state.iteration as u64];
        key.extend_from_slice(ids);
        keyed(self.config.seed, stream, &key)
    }

    // ---- step 1: loadings row and coefficient column ------------------------

    /// Log full conditional of `F_j` (up to a constant) and its gradient.
    /// `f` holds `p` coefficients followed by the free loadings of row `j`.
    pub fn row_log_target(&self, j: usize, f: &DVector<f64>, state: &ChainState) -> Option<(f64, DVector<f64>)> {
        let p = self.data.p();
        let m = state.params.a.free_in_row(j);
        debug_assert_eq!(f.len(), p + m);
        let mut lp = -0.5 * f.norm_squared() / self.config.prior_var;
        let mut grad = -f / self.config.prior_var;
        for (i, g) in self.data.grids.iter().enumerate() {
            let v = &state.latents.v[i];
            let x = &self.data.covariates[i];
            let alpha = state.params.alpha[i][j];
            for px in 0..g.n_px() {
                if !g.mask[px] {
                    continue;
                }
                let mut w = alpha;
                for c in 0..p {
                    w += x[(px, c)] * f[c];
                }
                for r in 0..m {
                    w += v[(px, r)] * f[p + r];
                }
                let y = f64::from(g.count(px, j));
                let dw = match self.family {
                    Family::Poisson => {
                        if w > W_CLAMP {
                            return None;
                        }
                        let e = w.exp();
                        lp += y * w - e;
                        y - e
                    }
                    Family::Gaussian { sd } => {
                        let r = y - w;
                        lp -= 0.5 * r * r / (sd * sd);
                        r / (sd * sd)
                    }
                };
                for c in 0..p {
                    grad[c] += x[(px, c)] * dw;
                }
                for r in 0..m {
                    grad[p + r] += v[(px, r)] * dw;
                }
            }
        }
        Some((lp, grad))
    }

    fn row_vector(&self, j: usize, state: &ChainState) -> DVector<f64> {
        let p = self.data.p();
        let m = state.params.a.free_in_row(j);
        DVector::from_fn(p + m, |c, _| {
            if c < p {
                state.params.b[(c, j)]
            } else {
                state.params.a.get(j, c - p)
            }
        })
    }

    fn row_proposal(&self, j: usize, state: &ChainState, step: f64) -> Option<mala::MalaStep> {
        let x = self.row_vector(j, state);
        let scales = vec![self.type_scale[j]; x.len()];
        let mut rng = self.rng(state, Stream::LoadingsRow, &[j as u64]);
        mala_step(&x, step, &Diagonal(&scales), |f| self.row_log_target(j, f, state), &mut rng)
    }

    fn apply_row(&self, j: usize, state: &mut ChainState, f: &DVector<f64>) {
        let p = self.data.p();
        for c in 0..f.len() {
            if c < p {
                state.params.b[(c, j)] = f[c];
            } else {
                // free_in_row guarantees c - p <= j
                state.params.a.set(j, c - p, f[c]).expect("free loading");
            }
        }
    }

    fn record_row(&self, j: usize, state: &mut ChainState, step: Option<mala::MalaStep>) -> StepOutcome {
        let burn = self.burning(state);
        let target = self.config.target_accept_mala;
        let it = state.iteration;
        let outcome = match step {
            None => {
                warn!("row {j}: current state refused by the target");
                state.counts_mut(burn).nonfinite_events += 1;
                StepOutcome::SKIPPED
            }
            Some(s) => {
                if s.refused {
                    debug!("row {j}: proposal refused");
                    state.counts_mut(burn).clamp_events += 1;
                }
                if s.accepted {
                    self.apply_row(j, state, &s.proposal);
                }
                StepOutcome {
                    accepted: s.accepted,
                    accept_prob: s.accept_prob,
                    refused: s.refused,
                }
            }
        };
        let c = state.counts_mut(burn);
        c.row_tries[j] += 1;
        c.row_accept[j] += u64::from(outcome.accepted);
        if burn {
            adapt_log_step(&mut state.adapt.row_step[j], outcome.accept_prob, target, it);
        }
        outcome
    }

    pub fn update_loadings_row(&self, j: usize, state: &mut ChainState) -> StepOutcome {
        let step = self.row_proposal(j, state, state.adapt.row_step[j]);
        self.record_row(j, state, step)
    }

    fn update_rows(&self, state: &mut ChainState) {
        let steps: Vec<Option<mala::MalaStep>> = (0..self.q())
            .into_par_iter()
            .map(|j| self.row_proposal(j, state, state.adapt.row_step[j]))
            .collect();
        for (j, s) in steps.into_iter().enumerate() {
            self.record_row(j, state, s);
        }
    }

    // ---- step 3: decays -----------------------------------------------------

    fn factor_logdensity(&self, state: &ChainState, r: usize, factors: &BlockFactors) -> f64 {
        let n_px = self.data.grid().n_px();
        let per_subject: Vec<f64> = state
            .latents
            .v
            .par_iter()
            .map(|v| {
                let col = &v.as_slice()[r * n_px..(r + 1) * n_px];
                meshedgp::mgp_logdensity(col, factors, &self.mesh)
            })
            .collect();
        per_subject.iter().sum()
    }

    /// Log Hastings ratio for moving `phi_r` to `proposal` under a log-scale
    /// random walk with a uniform prior. `-inf` outside the prior support.
    pub fn phi_log_accept_ratio(&self, r: usize, proposal: f64, state: &ChainState) -> Result<(f64, Option<BlockFactors>)> {
        if !state.params.phi.in_support(proposal) {
            return Ok((f64::NEG_INFINITY, None));
        }
        let current = state.params.phi.phi[r];
        if proposal == current {
            return Ok((0.0, None));
        }
        let factors = compute_factors(&self.mesh, &self.coords, proposal)?;
        let lp_new = self.factor_logdensity(state, r, &factors);
        let lp_old = self.factor_logdensity(state, r, &state.caches[r].factors);
        // the Jacobian of the log transform makes the ratio carry phi'/phi
        Ok((lp_new - lp_old + proposal.ln() - current.ln(), Some(factors)))
    }

    pub fn update_phi(&self, r: usize, state: &mut ChainState) -> StepOutcome {
        let burn = self.burning(state);
        let mut rng = self.rng(state, Stream::Decay, &[r as u64]);
        let z: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let current = state.params.phi.phi[r];
        let proposal = current * (state.adapt.phi_log_sd[r] * z).exp();
        let (log_ratio, factors) = match self.phi_log_accept_ratio(r, proposal, state) {
            Ok(x) => x,
            Err(e) => {
                warn!("phi[{r}] = {proposal}: {e}; rejecting");
                state.counts_mut(burn).nonfinite_events += 1;
                (f64::NEG_INFINITY, None)
            }
        };
        let accept_prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
        let mut accepted = u < accept_prob;
        if accepted {
            if let Some(f) = factors {
                match FactorCache::from_factors(&self.mesh, f) {
                    Ok(c) => state.caches[r] = c,
                    Err(e) => {
                        warn!("phi[{r}] = {proposal}: {e}; rejecting");
                        state.counts_mut(burn).nonfinite_events += 1;
                        accepted = false;
                    }
                }
            }
            if accepted {
                state.params.phi.phi[r] = proposal;
            }
        }
        let it = state.iteration;
        let c = state.counts_mut(burn);
        c.phi_tries[r] += 1;
        c.phi_accept[r] += u64::from(accepted);
        if burn {
            let gain = (it as f64 + 1.0).powf(-0.6);
            let sd = &mut state.adapt.phi_log_sd[r];
            *sd = (sd.ln() + gain * (accept_prob - self.config.target_accept_phi))
                .clamp(-10.0, 3.0)
                .exp();
        }
        StepOutcome {
            accepted,
            accept_prob,
            refused: !log_ratio.is_finite(),
        }
    }

    /// Log acceptance ratio of the whitened move to `proposal`, with the
    /// moved fields of factor `r` (one column per subject).
    fn phi_whitened_ratio(&self, r: usize, proposal: f64, state: &ChainState) -> Result<Option<(f64, BlockFactors, Vec<Vec<f64>>)>> {
        if !state.params.phi.in_support(proposal) {
            return Ok(None);
        }
        let n_px = self.data.grid().n_px();
        let factors = compute_factors(&self.mesh, &self.coords, proposal)?;
        let a = state.params.a.matrix();
        let q = self.q();
        let per_subject: Vec<Option<(f64, Vec<f64>)>> = (0..self.n())
            .into_par_iter()
            .map(|i| {
                let v = &state.latents.v[i];
                let col = &v.as_slice()[r * n_px..(r + 1) * n_px];
                let z = meshedgp::whiten(col, &state.caches[r].factors, &self.mesh);
                let moved = meshedgp::sample_prior_from_normals(&factors, &self.mesh, &z);
                let w = log_intensity(&state.params, i, v, &self.data.covariates[i]);
                let g = &self.data.grids[i];
                let mut diff = 0.0;
                for px in 0..n_px {
                    if !g.mask[px] {
                        continue;
                    }
                    let dv = moved[px] - col[px];
                    for j in 0..q {
                        let w0 = w[(px, j)];
                        let w1 = w0 + dv * a[(j, r)];
                        if w1 > W_CLAMP {
                            return None;
                        }
                        diff += f64::from(g.count(px, j)) * (w1 - w0) - (w1.exp() - w0.exp());
                    }
                }
                Some((diff, moved))
            })
            .collect();
        let mut log_ratio = proposal.ln() - state.params.phi.phi[r].ln();
        let mut fields = Vec::with_capacity(per_subject.len());
        for item in per_subject {
            match item {
                Some((d, m)) => {
                    log_ratio += d;
                    fields.push(m);
                }
                None => return Ok(None),
            }
        }
        Ok(Some((log_ratio, factors, fields)))
    }

    /// Decay move with the whitened latent innovations held fixed; the
    /// acceptance ratio involves only the Poisson likelihood and the
    /// log-scale Jacobian.
    pub fn update_phi_whitened(&self, r: usize, state: &mut ChainState) -> StepOutcome {
        let burn = self.burning(state);
        let mut rng = self.rng(state, Stream::DecayWhitened, &[r as u64]);
        let z: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let proposal = state.params.phi.phi[r] * (state.adapt.phi_whitened_log_sd[r] * z).exp();
        let (log_ratio, payload) = match self.phi_whitened_ratio(r, proposal, state) {
            Ok(Some((lr, factors, fields))) => (lr, Some((factors, fields))),
            Ok(None) => (f64::NEG_INFINITY, None),
            Err(e) => {
                warn!("whitened phi[{r}] = {proposal}: {e}; rejecting");
                state.counts_mut(burn).nonfinite_events += 1;
                (f64::NEG_INFINITY, None)
            }
        };
        let accept_prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
        let mut accepted = u < accept_prob;
        if accepted {
            let (factors, fields) = payload.expect("finite ratio carries a proposal");
            match FactorCache::from_factors(&self.mesh, factors) {
                Ok(cache) => {
                    state.params.phi.phi[r] = proposal;
                    state.caches[r] = cache;
                    for (v, m) in state.latents.v.iter_mut().zip(fields) {
                        v.set_column(r, &DVector::from_vec(m));
                    }
                }
                Err(e) => {
                    warn!("whitened phi[{r}] = {proposal}: {e}; rejecting");
                    state.counts_mut(burn).nonfinite_events += 1;
                    accepted = false;
                }
            }
        }
        let it = state.iteration;
        let c = state.counts_mut(burn);
        c.phi_whitened_tries[r] += 1;
        c.phi_whitened_accept[r] += u64::from(accepted);
        if burn {
            let gain = (it as f64 + 1.0).powf(-0.6);
            let sd = &mut state.adapt.phi_whitened_log_sd[r];
            *sd = (sd.ln() + gain * (accept_prob - self.config.target_accept_phi))
                .clamp(-10.0, 3.0)
                .exp();
        }
        StepOutcome {
            accepted,
            accept_prob,
            refused: !log_ratio.is_finite(),
        }
    }

    // ---- step 4: latent blocks ----------------------------------------------

    /// Log full conditional (up to a constant) of block `s` of subject `i`
    /// and its gradient, with the block's values taken from `v`. The flat
    /// layout is factor-major: `x[r * |s| + t] = v[pix_t, r]`.
    fn latent_block_target(&self, i: usize, s: usize, v: &DMatrix<f64>, params: &ModelParams, caches: &[FactorCache]) -> Option<(f64, DVector<f64>)> {
        let pix = self.mesh.block(s);
        let ns = pix.len();
        let k = self.k();
        let q = self.q();
        let n_px = v.nrows();
        let mut lp = 0.0;
        let mut grad = DVector::zeros(ns * k);
        for r in 0..k {
            let col = &v.as_slice()[r * n_px..(r + 1) * n_px];
            let fs = &caches[r].factors.blocks[s];
            let mut u = meshedgp::block_residual(col, &self.mesh, fs, s);
            fs.r_chol.solve_lower_triangular_mut(&mut u);
            lp -= 0.5 * u.norm_squared();
            fs.r_chol.tr_solve_lower_triangular_mut(&mut u);
            let mut g = -u;
            for &c in self.mesh.children(s) {
                let fc = &caches[r].factors.blocks[c];
                let mut uc = meshedgp::block_residual(col, &self.mesh, fc, c);
                fc.r_chol.solve_lower_triangular_mut(&mut uc);
                lp -= 0.5 * uc.norm_squared();
                fc.r_chol.tr_solve_lower_triangular_mut(&mut uc);
                let off = self.mesh.parent_offset(c, s).expect("child lists its parent");
                g += fc.h.columns(off, ns).transpose() * uc;
            }
            grad.rows_mut(r * ns, ns).copy_from(&g);
        }
        let grid = &self.data.grids[i];
        let x = &self.data.covariates[i];
        let alpha = &params.alpha[i];
        let a = params.a.matrix();
        let p = self.data.p();
        for (t, &px) in pix.iter().enumerate() {
            if !grid.mask[px] {
                continue;
            }
            for j in 0..q {
                let mut w = alpha[j];
                for c in 0..p {
                    w += x[(px, c)] * params.b[(c, j)];
                }
                for r in 0..k {
                    w += v[(px, r)] * a[(j, r)];
                }
                if w > W_CLAMP {
                    return None;
                }
                let e = w.exp();
                let y = f64::from(grid.count(px, j));
                lp += y * w - e;
                let dw = y - e;
                for r in 0..k {
                    grad[r * ns + t] += dw * a[(j, r)];
                }
            }
        }
        Some((lp, grad))
    }

    /// Log full conditional of latent block `s` of subject `i` at block
    /// values `x` (factor-major), other pixels taken from `state`.
    pub fn latent_log_target(&self, i: usize, s: usize, x: &DVector<f64>, state: &ChainState) -> Option<(f64, DVector<f64>)> {
        let mut v = state.latents.v[i].clone();
        self.write_block(s, &mut v, x);
        self.latent_block_target(i, s, &v, &state.params, &state.caches)
    }

    fn write_block(&self, s: usize, v: &mut DMatrix<f64>, x: &DVector<f64>) {
        let pix = self.mesh.block(s);
        let ns = pix.len();
        for r in 0..self.k() {
            for (t, &px) in pix.iter().enumerate() {
                v[(px, r)] = x[r * ns + t];
            }
        }
    }

    fn read_block(&self, s: usize, v: &DMatrix<f64>) -> DVector<f64> {
        let pix = self.mesh.block(s);
        let ns = pix.len();
        DVector::from_fn(ns * self.k(), |idx, _| v[(pix[idx % ns], idx / ns)])
    }

    /// One latent-block transition; returns the full step record.
    #[allow(clippy::too_many_arguments)]
    fn latent_block_step(
        &self,
        i: usize,
        s: usize,
        v: &mut DMatrix<f64>,
        step: f64,
        params: &ModelParams,
        caches: &[FactorCache],
        chain: usize,
        iteration: usize,
    ) -> Option<mala::MalaStep> {
        let mut rng = keyed(
            self.config.seed,
            Stream::LatentBlock,
            &[chain as u64, iteration as u64, i as u64, s as u64],
        );
        let precond = BlockPrecision(caches.iter().map(|c| &c.precision[s]).collect());
        let x0 = self.read_block(s, v);
        let mut work = v.clone();
        let result = mala_step(
            &x0,
            step,
            &precond,
            |x| {
                self.write_block(s, &mut work, x);
                self.latent_block_target(i, s, &work, params, caches)
            },
            &mut rng,
        );
        if let Some(st) = &result {
            if st.accepted {
                self.write_block(s, v, &st.proposal);
            }
        }
        result
    }

    fn sweep_subject_latent(
        &self,
        i: usize,
        v: &mut DMatrix<f64>,
        steps: &mut [f64],
        params: &ModelParams,
        caches: &[FactorCache],
        chain: usize,
        iteration: usize,
    ) -> BlockTally {
        let burn = iteration < self.config.n_burn;
        let mut tally = BlockTally::default();
        for &s in self.mesh.topo_order() {
            let res = self.latent_block_step(i, s, v, steps[s], params, caches, chain, iteration);
            tally.tries += 1;
            let prob = match res {
                None => {
                    tally.nonfinite += 1;
                    0.0
                }
                Some(st) => {
                    tally.accept += u64::from(st.accepted);
                    tally.clamp += u64::from(st.refused);
                    st.accept_prob
                }
            };
            if burn {
                adapt_log_step(&mut steps[s], prob, self.config.target_accept_mala, iteration);
            }
        }
        tally
    }

    /// One MALA step on block `s` of subject `i`, all factors jointly.
    pub fn update_latent_block(&self, i: usize, s: usize, state: &mut ChainState) -> StepOutcome {
        let burn = self.burning(state);
        let ChainState {
            params,
            latents,
            caches,
            adapt,
            iteration,
            chain,
            ..
        } = state;
        let step = adapt.latent_step[i][s];
        let res = self.latent_block_step(i, s, &mut latents.v[i], step, params, caches, *chain, *iteration);
        let outcome = match res {
            None => StepOutcome::SKIPPED,
            Some(st) => StepOutcome {
                accepted: st.accepted,
                accept_prob: st.accept_prob,
                refused: st.refused,
            },
        };
        if burn {
            adapt_log_step(
                &mut adapt.latent_step[i][s],
                outcome.accept_prob,
                self.config.target_accept_mala,
                *iteration,
            );
        }
        let c = state.counts_mut(burn);
        c.latent_tries += 1;
        c.latent_accept += u64::from(outcome.accepted);
        outcome
    }

    /// Full transition record of a latent-block step, without touching the state.
    pub fn latent_block_transition(&self, i: usize, s: usize, state: &ChainState, step: f64) -> Option<mala::MalaStep> {
        let mut v = state.latents.v[i].clone();
        self.latent_block_step(i, s, &mut v, step, &state.params, &state.caches, state.chain, state.iteration)
    }

    fn update_latents(&self, state: &mut ChainState) {
        let burn = self.burning(state);
        let ChainState {
            params,
            latents,
            caches,
            adapt,
            iteration,
            chain,
            ..
        } = state;
        let (params, caches) = (&*params, &caches[..]);
        let (chain, iteration) = (*chain, *iteration);
        let tallies: Vec<BlockTally> = latents
            .v
            .par_iter_mut()
            .zip(adapt.latent_step.par_iter_mut())
            .enumerate()
            .map(|(i, (v, steps))| self.sweep_subject_latent(i, v, steps, params, caches, chain, iteration))
            .collect();
        let c = state.counts_mut(burn);
        for t in &tallies {
            c.absorb(t);
        }
    }

    // ---- offsets ------------------------------------------------------------

    /// Log full conditional of `alpha_i` (up to a constant) and its gradient.
    pub fn intercept_log_target(&self, i: usize, alpha: &DVector<f64>, rest: &DMatrix<f64>) -> Option<(f64, DVector<f64>)> {
        let grid = &self.data.grids[i];
        let q = self.q();
        let mut lp = -0.5 * alpha.norm_squared() / self.config.prior_var;
        let mut grad = -alpha / self.config.prior_var;
        for px in 0..grid.n_px() {
            if !grid.mask[px] {
                continue;
            }
            for j in 0..q {
                let w = alpha[j] + rest[(px, j)];
                if w > W_CLAMP {
                    return None;
                }
                let e = w.exp();
                let y = f64::from(grid.count(px, j));
                lp += y * w - e;
                grad[j] += y - e;
            }
        }
        Some((lp, grad))
    }

    fn intercept_step(&self, i: usize, alpha: &mut DVector<f64>, step: &mut f64, v: &DMatrix<f64>, a: &FactorLoadings, b: &DMatrix<f64>, chain: usize, iteration: usize) -> (StepOutcome, bool) {
        let zero = DVector::zeros(self.q());
        let rest = crate::likelihood::log_intensity_parts(&zero, b, a, v, &self.data.covariates[i]);
        let mut rng = keyed(
            self.config.seed,
            Stream::Intercept,
            &[chain as u64, iteration as u64, i as u64],
        );
        let res = mala_step(
            alpha,
            *step,
            &Diagonal(&self.alpha_scale[i]),
            |x| self.intercept_log_target(i, x, &rest),
            &mut rng,
        );
        let (outcome, clamp) = match res {
            None => (StepOutcome::SKIPPED, false),
            Some(st) => {
                if st.accepted {
                    *alpha = st.proposal;
                }
                (
                    StepOutcome {
                        accepted: st.accepted,
                        accept_prob: st.accept_prob,
                        refused: st.refused,
                    },
                    st.refused,
                )
            }
        };
        if iteration < self.config.n_burn {
            adapt_log_step(step, outcome.accept_prob, self.config.target_accept_mala, iteration);
        }
        (outcome, clamp)
    }

    pub fn update_intercepts(&self, i: usize, state: &mut ChainState) -> StepOutcome {
        let burn = self.burning(state);
        let (outcome, clamp) = self.intercept_step(
            i,
            &mut state.params.alpha[i],
            &mut state.adapt.alpha_step[i],
            &state.latents.v[i],
            &state.params.a,
            &state.params.b,
            state.chain,
            state.iteration,
        );
        let c = state.counts_mut(burn);
        c.alpha_tries += 1;
        c.alpha_accept += u64::from(outcome.accepted);
        c.clamp_events += u64::from(clamp);
        outcome
    }

    fn update_all_intercepts(&self, state: &mut ChainState) {
        let burn = self.burning(state);
        let ChainState {
            params,
            latents,
            adapt,
            iteration,
            chain,
            ..
        } = state;
        let (a, b) = (&params.a, &params.b);
        let (chain, iteration) = (*chain, *iteration);
        let results: Vec<(StepOutcome, bool)> = params
            .alpha
            .par_iter_mut()
            .zip(adapt.alpha_step.par_iter_mut())
            .zip(latents.v.par_iter())
            .enumerate()
            .map(|(i, ((alpha, step), v))| self.intercept_step(i, alpha, step, v, a, b, chain, iteration))
            .collect();
        let c = state.counts_mut(burn);
        for (o, clamp) in results {
            c.alpha_tries += 1;
            c.alpha_accept += u64::from(o.accepted);
            c.clamp_events += u64::from(clamp);
        }
    }

    // ---- driver -------------------------------------------------------------

    /// One sweep over the selected updates, then advances the iteration counter.
    pub fn sweep(&self, state: &mut ChainState, updates: Updates) {
        if updates.rows {
            self.update_rows(state);
        }
        if updates.phi {
            for r in 0..self.k() {
                self.update_phi(r, state);
                if self.config.whitened_phi {
                    self.update_phi_whitened(r, state);
                }
            }
        }
        if updates.latent {
            self.update_latents(state);
            if self.config.group_moves {
                for r in 0..self.k() {
                    self.update_factor_scale(r, state);
                }
                if updates.intercepts {
                    self.update_offset_shifts(state);
                }
            }
        }
        if updates.intercepts {
            self.update_all_intercepts(state);
        }
        state.iteration += 1;
    }

    /// Pointwise log-likelihood of all observed cells, subject-major.
    pub fn pointwise_loglik(&self, state: &ChainState) -> Vec<f64> {
        let per_subject: Vec<Vec<f64>> = (0..self.n())
            .into_par_iter()
            .map(|i| {
                let w = log_intensity(&state.params, i, &state.latents.v[i], &self.data.covariates[i]);
                let mut out = Vec::new();
                pointwise_loglik(&self.data.grids[i], &w, &mut out);
                out
            })
            .collect();
        per_subject.concat()
    }

    fn snapshot(&self, state: &ChainState) -> Draw {
        let p = &state.params;
        Draw {
            iteration: state.iteration,
            a: p.a.to_rows().concat(),
            b: (0..p.b.nrows())
                .flat_map(|r| p.b.row(r).iter().copied().collect::<Vec<_>>())
                .collect(),
            alpha: p.alpha.iter().flat_map(|a| a.iter().copied()).collect(),
            phi: p.phi.phi.clone(),
        }
    }

    /// Runs one chain from initialisation to the last iteration.
    pub fn run(&self, chain: usize) -> Result<(ChainDraws, ChainState)> {
        let mut state = self.init_state(chain)?;
        let mut draws = Vec::with_capacity(self.config.n_stored());
        let mut loglik = Vec::new();
        let mut loglik_iterations = Vec::new();
        while state.iteration < self.config.n_iter {
            self.sweep(&mut state, Updates::ALL);
            let t = state.iteration - 1;
            if t >= self.config.n_burn && (t - self.config.n_burn).is_multiple_of(self.config.thin) {
                let mut d = self.snapshot(&state);
                d.iteration = t;
                let idx = draws.len();
                draws.push(d);
                if self.config.loglik_thin > 0 && idx % self.config.loglik_thin == 0 {
                    loglik.push(self.pointwise_loglik(&state));
                    loglik_iterations.push(t);
                }
            }
        }
        let summary = ChainSummary::from_counts(&state.counts, &state.burn_counts, &state.adapt.phi_log_sd);
        Ok((
            ChainDraws {
                chain,
                draws,
                loglik,
                loglik_iterations,
                summary,
            },
            state,
        ))
    }
}

/// Fits every chain requested by `config` and collects a draws store.
pub fn run_chain(data: &Dataset, config: &SamplerConfig) -> Result<DrawsStore> {
    let sampler = Sampler::new(data, config.clone())?;
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| sampler.run(c).map(|(d, _)| d))
        .collect::<Result<Vec<_>>>()?;
    let grid = data.grid();
    let n_obs = chains
        .first()
        .and_then(|c| c.loglik.first())
        .map_or(0, Vec::len);
    Ok(DrawsStore {
        meta: StoreMeta {
            seed: config.seed,
            config_hash: config_hash(config)?,
            labels: data.labels.clone(),
            q: data.q(),
            k: config.k,
            p: data.p(),
            n_subjects: data.n_subjects(),
            l_star: data.l_star,
            extent: grid.extent,
            n_x: grid.n_x,
            n_y: grid.n_y,
            n_obs,
        },
        chains,
    })
}
