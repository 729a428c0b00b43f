//! Ground-truth data generator: dense-Cholesky latent factors, shared
//! loadings and decays, Poisson counts on a pixel grid.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{default_h_grid, DEFAULT_H_POINTS};
use crate::kernel::{cross_corr_raw, exp_gram, FactorLoadings};
use crate::preprocess::{CountGrid, GridSpec};
use crate::rng::{keyed, Stream};
use crate::{Error, Result};

/// Largest grid simulated with a dense Cholesky factor.
pub const MAX_SIM_PIXELS: usize = 48 * 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub q: usize,
    pub k_star: usize,
    pub n_images: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub phi_range: (f64, f64),
    /// Shared log-intensity offset.
    pub alpha: f64,
    /// Unit-scaled domain lengths.
    pub extent: (f64, f64),
    /// Microns per unit coordinate.
    pub l_star: f64,
    pub seed: u64,
    /// Fixed `q x k*` loadings instead of random ones.
    pub loadings: Option<Vec<Vec<f64>>>,
    /// Fixed decays instead of uniform draws.
    pub phi: Option<Vec<f64>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            q: 4,
            k_star: 2,
            n_images: 20,
            n_x: 16,
            n_y: 16,
            phi_range: (1.0, 3.0),
            alpha: -2.0,
            extent: (1.0, 0.75),
            l_star: 3000.0,
            seed: 1,
            loadings: None,
            phi: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.q == 0 || self.k_star == 0 || self.k_star > self.q {
            return bad(format!("need 1 <= k* <= q, got k* = {}, q = {}", self.k_star, self.q));
        }
        if self.n_images == 0 {
            return bad("n_images must be >= 1".into());
        }
        let (lo, hi) = self.phi_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("phi range {:?} invalid", self.phi_range));
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if self.n_x * self.n_y > MAX_SIM_PIXELS {
            return bad(format!(
                "{}x{} grid exceeds the {MAX_SIM_PIXELS}-pixel dense simulation limit",
                self.n_x, self.n_y
            ));
        }
        if let Some(rows) = &self.loadings {
            if rows.len() != self.q || rows.iter().any(|r| r.len() != self.k_star) {
                return bad(format!("loadings must be {} x {}", self.q, self.k_star));
            }
        }
        if let Some(phi) = &self.phi {
            if phi.len() != self.k_star || phi.iter().any(|&p| !(p > 0.0)) {
                return bad(format!("phi must hold {} positive values", self.k_star));
            }
        }
        GridSpec::new(self.n_x, self.n_y, self.l_star, self.extent)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.n_x, self.n_y, self.l_star, self.extent)
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.q).map(|j| format!("type{j}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCurve {
    pub pair: (usize, usize),
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    /// Rows of the `q x k*` loadings.
    pub a: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    pub alpha: f64,
    pub l_star: f64,
    pub extent: (f64, f64),
    /// Per image, column-major `n_px x k*` latent factors.
    pub v: Vec<Vec<f64>>,
    /// Per image, column-major `n_px x q` log-intensities.
    pub w: Vec<Vec<f64>>,
    /// Unit-scale distances of `curves`.
    pub h_grid: Vec<f64>,
    /// Every pair `r <= s`; empty when a loadings row is zero.
    pub curves: Vec<TruthCurve>,
    pub seed: u64,
    /// Hash of the generating configuration.
    pub config_hash: String,
}

impl TruthRecord {
    pub fn loadings(&self) -> DMatrix<f64> {
        let (q, k) = (self.a.len(), self.phi.len());
        DMatrix::from_fn(q, k, |r, j| self.a[r][j])
    }

    pub fn curve(&self, pair: (usize, usize)) -> Option<&[f64]> {
        let key = (pair.0.min(pair.1), pair.0.max(pair.1));
        self.curves.iter().find(|c| c.pair == key).map(|c| c.values.as_slice())
    }
}

fn draw_loadings<R: Rng>(q: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..q)
        .map(|r| {
            (0..k)
                .map(|j| {
                    if j == r {
                        rng.random_range(0.5..1.0)
                    } else if j < r {
                        rng.random_range(-0.7..0.7)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Simulates `n_images` count grids sharing loadings, decays and offset.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(Vec<CountGrid>, TruthRecord)> {
    cfg.validate()?;
    let (q, k) = (cfg.q, cfg.k_star);
    let mut rng = keyed(cfg.seed, Stream::Simulation, &[]);
    let a_rows = match &cfg.loadings {
        Some(rows) => rows.clone(),
        None => draw_loadings(q, k, &mut rng),
    };
    let phi = match &cfg.phi {
        Some(p) => p.clone(),
        None => {
            let (lo, hi) = cfg.phi_range;
            (0..k)
                .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect()
        }
    };
    let a = DMatrix::from_fn(q, k, |r, j| a_rows[r][j]);
    let grid = cfg.grid()?;
    let coords = grid.unit_coords();
    let n_px = coords.len();
    let chols = phi
        .iter()
        .map(|&p| {
            exp_gram(&coords, &coords, p)
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| Error::Singular(format!("correlation matrix at phi = {p}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let images: Vec<(CountGrid, Vec<f64>, Vec<f64>)> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed(cfg.seed, Stream::SimulationImage, &[i as u64]);
            let mut v = DMatrix::zeros(n_px, k);
            for (j, l) in chols.iter().enumerate() {
                let eps = DVector::from_fn(n_px, |_, _| rng.sample::<f64, _>(StandardNormal));
                v.set_column(j, &(l * eps));
            }
            let w = (&v * a.transpose()).add_scalar(cfg.alpha);
            let mut g = CountGrid::zeros(format!("sim{i:03}"), grid, q);
            for p in 0..n_px {
                for j in 0..q {
                    let lambda = w[(p, j)].exp();
                    let y = Poisson::new(lambda)
                        .map_err(|e| Error::NonFinite(format!("intensity {lambda}: {e}")))?
                        .sample(&mut rng);
                    *g.count_mut(p, j) = y as u32;
                }
            }
            Ok((g, v.as_slice().to_vec(), w.as_slice().to_vec()))
        })
        .collect::<Result<_>>()?;

    let h_grid = default_h_grid(cfg.extent, DEFAULT_H_POINTS);
    let mut curves = Vec::new();
    for r in 0..q {
        for s in r..q {
            let values = if (0..k).any(|j| a[(r, j)] != 0.0) && (0..k).any(|j| a[(s, j)] != 0.0) {
                cross_corr_raw(&a, &phi, r, s, &h_grid)?
            } else {
                Vec::new()
            };
            curves.push(TruthCurve { pair: (r, s), values });
        }
    }
    let mut grids = Vec::with_capacity(images.len());
    let mut vs = Vec::with_capacity(images.len());
    let mut ws = Vec::with_capacity(images.len());
    for (g, v, w) in images {
        grids.push(g);
        vs.push(v);
        ws.push(w);
    }
    let truth = TruthRecord {
        a: a_rows,
        phi,
        alpha: cfg.alpha,
        l_star: cfg.l_star,
        extent: cfg.extent,
        v: vs,
        w: ws,
        h_grid,
        curves,
        seed: cfg.seed,
        config_hash: crate::io::config_hash(cfg)?,
    };
    Ok((grids, truth))
}

/// Checks the simulated loadings obey the structural zeros.
pub fn truth_loadings(truth: &TruthRecord) -> Result<FactorLoadings> {
    FactorLoadings::from_rows(&truth.a)
}

/// Sums `factor x factor` pixel squares. A coarse pixel is observed only
/// when all of its fine pixels are.
pub fn coarsen_grid(grids: &[CountGrid], factor: usize) -> Result<Vec<CountGrid>> {
    if factor == 0 {
        return Err(Error::Config("coarsening factor must be >= 1".into()));
    }
    grids
        .iter()
        .map(|g| {
            let fine = &g.grid;
            for n in [fine.n_x, fine.n_y] {
                if n % factor != 0 {
                    return Err(Error::NonDivisible { n, factor });
                }
            }
            let coarse = GridSpec::new(fine.n_x / factor, fine.n_y / factor, fine.scale, fine.extent)?;
            let mut out = CountGrid::zeros(g.image_id.clone(), coarse, g.q);
            for p in 0..fine.n_px() {
                let (px, py) = fine.pixel_xy(p);
                let c = coarse.pixel_index(px / factor, py / factor);
                for j in 0..g.q {
                    *out.count_mut(c, j) += g.count(p, j);
                }
                if !g.mask[p] {
                    out.mask[c] = false;
                }
            }
            Ok(out)
        })
        .collect()
}
