//! Acceptance criteria A1-A10.
//!
//! Built with `harness = false`: `main` runs every criterion, prints one
//! `PASS`/`FAIL` line each and exits nonzero if any fails. Positional
//! arguments (`A3 A9`) restrict the run to those criteria.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use meshlgcp::diagnostics::{aggregate_mad, bulk_ess, rhat, waic, DrawsStore};
use meshlgcp::io::write_store;
use meshlgcp::kernel::{cross_corr_raw, cross_cov_raw, FactorLoadings};
use meshlgcp::likelihood::{
    grad_coefficients, grad_intercepts, grad_latent, grad_loadings, log_intensity_parts, loglik_grad_w, poisson_loglik,
};
use meshlgcp::meshedgp::{build_mesh, compute_factors, mgp_logdensity, sample_prior_from_normals, MeshGraph};
use meshlgcp::preprocess::{apply_mask, bin_dataset, CountGrid, GridSpec, Point, PointPattern};
use meshlgcp::sampler::{run_chain, Dataset, FactorCache, Sampler, SamplerConfig, Updates};
use meshlgcp::simulate::{coarsen_grid, simulate_dataset, SimConfig, TruthRecord};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("A1", "meshed GP equals dense MVN on full-parent DAGs", a1_mgp_exactness),
    ("A2", "analytic gradients match central differences", a2_gradients),
    ("A3", "simulation recovery of cross-correlation curves", a3_recovery),
    ("A4", "underspecified k recovers worse", a4_k_ordering),
    ("A5", "WAIC ordering over k", a5_waic_ordering),
    ("A6", "grid-size robustness", a6_grid_size),
    ("A7", "invariances", a7_invariance),
    ("A8", "diagnostics calibration", a8_diagnostics),
    ("A9", "determinism across thread counts", a9_determinism),
    ("A10", "prior recovery on fully masked data", a10_prior_recovery),
];

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !only.is_empty() && !only.iter().any(|o| o.eq_ignore_ascii_case(id)) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !out.pass {
            failed += 1;
        }
        println!(
            "{id:<3} {} {name}: {} [{:.1} s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

// ---- A1 ---------------------------------------------------------------------

/// Dense `N(0, Sigma)` log-density with `Sigma_ab = exp(-phi |x_a - x_b|)`.
fn dense_logdensity(v: &[f64], coords: &[[f64; 2]], phi: f64) -> f64 {
    let n = v.len();
    let sigma = DMatrix::from_fn(n, n, |a, b| {
        let d = ((coords[a][0] - coords[b][0]).powi(2) + (coords[a][1] - coords[b][1]).powi(2)).sqrt();
        (-phi * d).exp()
    });
    let chol = sigma.cholesky().expect("exponential Gram matrix is SPD");
    let mut u = DVector::from_column_slice(v);
    chol.l().solve_lower_triangular_mut(&mut u);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (u.norm_squared() + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn a1_mgp_exactness() -> Outcome {
    let shapes = [(3, 4), (4, 3), (2, 6), (3, 3), (2, 5), (1, 12), (4, 2)];
    let mut r = rng(11);
    let mut worst = 0.0_f64;
    for inst in 0..100 {
        let (nx, ny) = shapes[inst % shapes.len()];
        let grid = GridSpec::new(nx, ny, 1.0, (r.random_range(0.3..1.0), r.random_range(0.3..1.0))).unwrap();
        let tile = (r.random_range(1..=nx), r.random_range(1..=ny));
        let west_south = build_mesh(&grid, tile).unwrap();
        let mesh = MeshGraph::with_full_parents(grid.n_px(), west_south.blocks().to_vec()).unwrap();
        let coords = grid.unit_coords();
        let phi = r.random_range(0.1..10.0);
        let scale = r.random_range(0.2..3.0);
        let v: Vec<f64> = (0..grid.n_px()).map(|_| scale * normal(&mut r)).collect();
        let factors = compute_factors(&mesh, &coords, phi).unwrap();
        let got = mgp_logdensity(&v, &factors, &mesh);
        worst = worst.max((got - dense_logdensity(&v, &coords, phi)).abs());
    }
    outcome(worst < 1e-8, format!("max |delta| {worst:.2e} over 100 instances (< 1e-8)"))
}

// ---- A2 ---------------------------------------------------------------------

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|c| {
            let h = 1e-6 * x[c].abs().max(1.0);
            y[c] = x[c] + h;
            let up = f(&y);
            y[c] = x[c] - h;
            let down = f(&y);
            y[c] = x[c];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|g - fd| / max(|fd|, 1)` in the Euclidean norm.
fn rel_err(g: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(g.len(), fd.len());
    let diff: f64 = g.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1.0)
}

struct GradInstance {
    data: Dataset,
    a: FactorLoadings,
    b: DMatrix<f64>,
    alpha: Vec<DVector<f64>>,
    v: Vec<DMatrix<f64>>,
    phi: Vec<f64>,
}

fn grad_instance(seed: u64) -> GradInstance {
    let mut r = rng(1000 + seed);
    let q = r.random_range(2..=3);
    let k = r.random_range(1..=2);
    let (n, p) = (2, 1);
    let grid = GridSpec::new(4, 4, 1.0, (1.0, 0.75)).unwrap();
    let n_px = grid.n_px();
    let mut a = FactorLoadings::zeros(q, k).unwrap();
    for j in 0..q {
        for c in 0..k.min(j + 1) {
            a.set(j, c, 0.5 * normal(&mut r)).unwrap();
        }
    }
    let b = DMatrix::from_fn(p, q, |_, _| 0.3 * normal(&mut r));
    let alpha: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(q, |_, _| 0.3 * normal(&mut r))).collect();
    let v: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::from_fn(n_px, k, |_, _| 0.5 * normal(&mut r))).collect();
    let xs: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::from_fn(n_px, p, |_, _| 0.5 * normal(&mut r))).collect();
    let phi = (0..k).map(|_| r.random_range(0.5..5.0)).collect();
    let mut grids = Vec::new();
    for i in 0..n {
        let w = log_intensity_parts(&alpha[i], &b, &a, &v[i], &xs[i]);
        let mut g = CountGrid::zeros(format!("img{i}"), grid, q);
        for px in 0..n_px {
            for j in 0..q {
                *g.count_mut(px, j) = Poisson::new(w[(px, j)].exp()).unwrap().sample(&mut r) as u32;
            }
        }
        g.mask[r.random_range(0..n_px)] = false;
        grids.push(g);
    }
    let labels = (0..q).map(|j| format!("t{j}")).collect();
    let data = Dataset::new(grids, labels).unwrap().with_covariates(xs).unwrap();
    GradInstance {
        data,
        a,
        b,
        alpha,
        v,
        phi,
    }
}

fn total_loglik(
    data: &Dataset,
    alpha: &[DVector<f64>],
    b: &DMatrix<f64>,
    a: &FactorLoadings,
    v: &[DMatrix<f64>],
) -> f64 {
    (0..data.n_subjects())
        .map(|i| {
            let w = log_intensity_parts(&alpha[i], b, a, &v[i], &data.covariates[i]);
            poisson_loglik(&data.grids[i], &w)
        })
        .sum()
}

/// Largest relative error of each gradient family on one instance.
fn grad_errors(inst: &GradInstance) -> Vec<(&'static str, f64)> {
    let GradInstance {
        data,
        a,
        b,
        alpha,
        v,
        phi,
    } = inst;
    let (q, k, p, n) = (data.q(), a.k(), data.p(), data.n_subjects());
    let ws: Vec<DMatrix<f64>> = (0..n)
        .map(|i| log_intensity_parts(&alpha[i], b, a, &v[i], &data.covariates[i]))
        .collect();
    let gs: Vec<DMatrix<f64>> = (0..n).map(|i| loglik_grad_w(&data.grids[i], &ws[i])).collect();
    let mut out = Vec::new();

    let mut e = 0.0_f64;
    for i in 0..n {
        let fd = central_diff(ws[i].as_slice(), |x| {
            poisson_loglik(&data.grids[i], &DMatrix::from_column_slice(ws[i].nrows(), q, x))
        });
        e = e.max(rel_err(gs[i].as_slice(), &fd));
    }
    out.push(("w", e));

    let mut e = 0.0_f64;
    for i in 0..n {
        let fd = central_diff(v[i].as_slice(), |x| {
            let mut vv = v.to_vec();
            vv[i] = DMatrix::from_column_slice(v[i].nrows(), k, x);
            total_loglik(data, alpha, b, a, &vv)
        });
        e = e.max(rel_err(grad_latent(&gs[i], a).as_slice(), &fd));
    }
    out.push(("v", e));

    let free: Vec<(usize, usize)> = (0..q).flat_map(|j| (0..k.min(j + 1)).map(move |c| (j, c))).collect();
    let x0: Vec<f64> = free.iter().map(|&(j, c)| a.get(j, c)).collect();
    let fd = central_diff(&x0, |x| {
        let mut aa = a.clone();
        for (&(j, c), &val) in free.iter().zip(x) {
            aa.set(j, c, val).unwrap();
        }
        total_loglik(data, alpha, b, &aa, v)
    });
    let ga = grad_loadings(&gs, v, q, k);
    let g: Vec<f64> = free.iter().map(|&(j, c)| ga[(j, c)]).collect();
    let structural_zero = (0..q).all(|j| (j + 1..k).all(|c| ga[(j, c)] == 0.0));
    out.push(("A", if structural_zero { rel_err(&g, &fd) } else { f64::INFINITY }));

    let fd = central_diff(b.as_slice(), |x| {
        total_loglik(data, alpha, &DMatrix::from_column_slice(p, q, x), a, v)
    });
    out.push(("B", rel_err(grad_coefficients(&gs, &data.covariates, p, q).as_slice(), &fd)));

    let mut e = 0.0_f64;
    for i in 0..n {
        let fd = central_diff(alpha[i].as_slice(), |x| {
            let mut al = alpha.to_vec();
            al[i] = DVector::from_column_slice(x);
            total_loglik(data, &al, b, a, v)
        });
        e = e.max(rel_err(grad_intercepts(&gs[i]).as_slice(), &fd));
    }
    out.push(("alpha", e));

    // the sampler's full-conditional targets, priors included
    let cfg = SamplerConfig {
        k,
        tile: (2, 2),
        ..SamplerConfig::default()
    };
    let s = Sampler::new(data, cfg).unwrap();
    let mut st = s.init_state(0).unwrap();
    st.params.a = a.clone();
    st.params.b = b.clone();
    st.params.alpha = alpha.to_vec();
    st.latents.v = v.to_vec();
    for (r, &ph) in phi.iter().enumerate() {
        st.params.phi.phi[r] = ph;
        st.caches[r] = FactorCache::new(s.mesh(), s.coords(), ph).unwrap();
    }

    let mut e = 0.0_f64;
    for j in 0..q {
        let m = a.free_in_row(j);
        let f0: Vec<f64> = (0..p).map(|c| b[(c, j)]).chain((0..m).map(|c| a.get(j, c))).collect();
        let (_, g) = s.row_log_target(j, &DVector::from_column_slice(&f0), &st).unwrap();
        let fd = central_diff(&f0, |x| s.row_log_target(j, &DVector::from_column_slice(x), &st).unwrap().0);
        e = e.max(rel_err(g.as_slice(), &fd));
    }
    out.push(("row target", e));

    let mut e = 0.0_f64;
    for i in 0..n {
        for blk in 0..s.mesh().n_blocks() {
            let pix = s.mesh().block(blk);
            let x0: Vec<f64> = (0..k).flat_map(|r| pix.iter().map(move |&px| v[i][(px, r)])).collect();
            let (_, g) = s.latent_log_target(i, blk, &DVector::from_column_slice(&x0), &st).unwrap();
            let fd = central_diff(&x0, |x| {
                s.latent_log_target(i, blk, &DVector::from_column_slice(x), &st).unwrap().0
            });
            e = e.max(rel_err(g.as_slice(), &fd));
        }
    }
    out.push(("latent target", e));

    let mut e = 0.0_f64;
    for i in 0..n {
        let rest = &ws[i] - DMatrix::from_fn(ws[i].nrows(), q, |_, j| alpha[i][j]);
        let (_, g) = s.intercept_log_target(i, &alpha[i], &rest).unwrap();
        let fd = central_diff(alpha[i].as_slice(), |x| {
            s.intercept_log_target(i, &DVector::from_column_slice(x), &rest).unwrap().0
        });
        e = e.max(rel_err(g.as_slice(), &fd));
    }
    out.push(("offset target", e));
    out
}

fn a2_gradients() -> Outcome {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..50 {
        for (name, e) in grad_errors(&grad_instance(seed)) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    let pass = worst.iter().all(|&(_, e)| e < 1e-5);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("max relative error over 50 instances (< 1e-5): {detail}"))
}

// ---- A3-A6: simulation studies ----------------------------------------------

const N_ITER: usize = 4000;
const N_BURN: usize = 2000;
const TILE: (usize, usize) = (4, 4);

fn fit(grids: Vec<CountGrid>, labels: Vec<String>, k: usize, chains: usize, seed: u64, loglik_thin: usize) -> DrawsStore {
    let data = Dataset::new(grids, labels).unwrap();
    let cfg = SamplerConfig {
        n_iter: N_ITER,
        n_burn: N_BURN,
        k,
        tile: TILE,
        chains,
        seed,
        loglik_thin,
        ..SamplerConfig::default()
    };
    run_chain(&data, &cfg).unwrap()
}

fn mad_vs_truth(store: &DrawsStore, truth: &TruthRecord) -> f64 {
    aggregate_mad(store, &truth.loadings(), &truth.phi, &store.default_h_grid()).unwrap()
}

fn a3_recovery() -> Outcome {
    let cfg = SimConfig::default();
    let (grids, truth) = simulate_dataset(&cfg).unwrap();
    let store = fit(grids, cfg.labels(), 2, 4, 1, 0);
    let mad = mad_vs_truth(&store, &truth);
    outcome(
        mad < 0.15,
        format!("aggregate MAD {mad:.4} (< 0.15); k=2, 4 chains x {N_ITER} iterations, seed 1"),
    )
}

/// MAD and WAIC of fits with k = 1, 2, 3 on one simulated replicate.
struct Replicate {
    mad: [f64; 3],
    waic: [f64; 3],
}

fn replicates() -> &'static [Replicate] {
    static REPS: OnceLock<Vec<Replicate>> = OnceLock::new();
    REPS.get_or_init(|| {
        (1..=10)
            .map(|seed| {
                let cfg = SimConfig {
                    seed,
                    ..SimConfig::default()
                };
                let (grids, truth) = simulate_dataset(&cfg).unwrap();
                let mut rep = Replicate {
                    mad: [0.0; 3],
                    waic: [0.0; 3],
                };
                for k in 1..=3 {
                    let store = fit(grids.clone(), cfg.labels(), k, 1, seed, 10);
                    rep.mad[k - 1] = mad_vs_truth(&store, &truth);
                    rep.waic[k - 1] = waic(&store.loglik_rows()).unwrap().waic;
                }
                eprintln!(
                    "  replicate {seed}: MAD {:.3} {:.3} {:.3}, WAIC {:.1} {:.1} {:.1}",
                    rep.mad[0], rep.mad[1], rep.mad[2], rep.waic[0], rep.waic[1], rep.waic[2]
                );
                rep
            })
            .collect()
    })
}

fn a4_k_ordering() -> Outcome {
    let reps = replicates();
    let wins = reps.iter().filter(|r| r.mad[0] > r.mad[1]).count();
    let mads: Vec<String> = reps.iter().map(|r| format!("{:.2}/{:.2}", r.mad[0], r.mad[1])).collect();
    outcome(
        wins >= 8,
        format!("MAD(k=1) > MAD(k=2) in {wins}/10 replicates (>= 8); k1/k2: {}", mads.join(" ")),
    )
}

fn a5_waic_ordering() -> Outcome {
    let reps = replicates();
    let wins = reps.iter().filter(|r| r.waic[0] > r.waic[1]).count();
    let rel = reps.iter().map(|r| (r.waic[2] - r.waic[1]).abs() / r.waic[1].abs()).sum::<f64>() / reps.len() as f64;
    outcome(
        wins >= 8 && rel < 0.05,
        format!(
            "WAIC(k=1) > WAIC(k=2) in {wins}/10 (>= 8); mean |WAIC(3) - WAIC(2)| / WAIC(2) = {:.3}% (< 5%)",
            100.0 * rel
        ),
    )
}

fn a6_grid_size() -> Outcome {
    let cfg = SimConfig {
        n_x: 24,
        n_y: 24,
        ..SimConfig::default()
    };
    let (fine, truth) = simulate_dataset(&cfg).unwrap();
    let coarse = coarsen_grid(&fine, 2).unwrap();
    let mad_fine = mad_vs_truth(&fit(fine, cfg.labels(), 2, 4, 1, 0), &truth);
    let mad_coarse = mad_vs_truth(&fit(coarse, cfg.labels(), 2, 4, 1, 0), &truth);
    let gap = (mad_fine - mad_coarse).abs();
    outcome(
        gap < 0.05,
        format!("MAD 24x24 {mad_fine:.4}, 12x12 {mad_coarse:.4}, difference {gap:.4} (< 0.05)"),
    )
}

// ---- A7 ---------------------------------------------------------------------

fn a7_invariance() -> Outcome {
    let mut r = rng(77);
    let mut problems = Vec::new();
    let h_grid: Vec<f64> = (0..25).map(|t| 0.05 * t as f64).collect();

    // factor column sign flips and permutations
    let mut perm_err = 0.0_f64;
    for _ in 0..200 {
        let q = r.random_range(2..=6);
        let k = r.random_range(1..=4);
        let a = DMatrix::from_fn(q, k, |_, _| normal(&mut r));
        let phi: Vec<f64> = (0..k).map(|_| r.random_range(0.1..10.0)).collect();
        let mut flipped = a.clone();
        for c in 0..k {
            if r.random_bool(0.5) {
                flipped.column_mut(c).neg_mut();
            }
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.reverse();
        order.rotate_left(r.random_range(0..k));
        let permuted = DMatrix::from_fn(q, k, |j, c| a[(j, order[c])]);
        let phi_perm: Vec<f64> = order.iter().map(|&c| phi[c]).collect();
        for &h in &h_grid {
            let base = cross_cov_raw(&a, &phi, h).unwrap();
            if cross_cov_raw(&flipped, &phi, h).unwrap() != base {
                problems.push(format!("sign flip changed cross-covariance at h={h}"));
            }
            let scale = (0..q).map(|j| a.row(j).norm_squared()).fold(0.0, f64::max);
            perm_err = perm_err.max((cross_cov_raw(&permuted, &phi_perm, h).unwrap() - &base).amax() / scale);
        }
        for rr in 0..q {
            for ss in rr..q {
                let base = cross_corr_raw(&a, &phi, rr, ss, &h_grid).unwrap();
                if cross_corr_raw(&flipped, &phi, rr, ss, &h_grid).unwrap() != base {
                    problems.push(format!("sign flip changed correlation ({rr},{ss})"));
                }
                let p = cross_corr_raw(&permuted, &phi_perm, rr, ss, &h_grid).unwrap();
                for (x, y) in p.iter().zip(&base) {
                    perm_err = perm_err.max((x - y).abs());
                }
            }
        }
    }
    if perm_err > 1e-14 {
        problems.push(format!("permutation error {perm_err:.2e}"));
    }

    // binning conserves mass, coarsening too
    for _ in 0..20 {
        let labels = ["T", "B", "M"];
        let patterns: Vec<PointPattern> = (0..3)
            .map(|i| {
                let (lx, ly) = (r.random_range(200.0..900.0), r.random_range(200.0..900.0));
                let pts = (0..r.random_range(0..400))
                    .map(|_| Point {
                        x: r.random_range(0.0..=lx),
                        y: r.random_range(0.0..=ly),
                        cell_type: labels[r.random_range(0..3)].into(),
                    })
                    .collect();
                PointPattern::new(format!("img{i}"), pts, (lx, ly))
            })
            .collect();
        let (grids, order, _) = bin_dataset(&patterns, 35.0).unwrap();
        for (pat, g) in patterns.iter().zip(&grids) {
            let totals = g.observed_totals();
            for (j, label) in order.iter().enumerate() {
                let expect = pat.points.iter().filter(|p| &p.cell_type == label).count() as u64;
                if totals[j] != expect {
                    problems.push(format!("{}: {label} binned {} of {expect}", pat.image_id, totals[j]));
                }
            }
        }
    }
    let cfg = SimConfig {
        n_images: 3,
        n_x: 12,
        n_y: 12,
        ..SimConfig::default()
    };
    let (grids, _) = simulate_dataset(&cfg).unwrap();
    for factor in [2, 3, 4, 6] {
        for (f, c) in grids.iter().zip(coarsen_grid(&grids, factor).unwrap()) {
            if f.observed_totals() != c.observed_totals() {
                problems.push(format!("coarsening by {factor} lost mass"));
            }
        }
    }

    // masking is linear: log-likelihood over a pixel set splits over any partition
    let mut mask_err = 0.0_f64;
    for g in &grids {
        let w = DMatrix::from_fn(g.n_px(), g.q, |_, _| 0.7 * normal(&mut r) - 1.0);
        let left: BTreeSet<usize> = (0..g.n_px()).filter(|_| r.random_bool(0.4)).collect();
        let right: BTreeSet<usize> = (0..g.n_px()).filter(|p| !left.contains(p)).collect();
        let full = poisson_loglik(g, &w);
        let split = poisson_loglik(&apply_mask(g, &left).unwrap(), &w) + poisson_loglik(&apply_mask(g, &right).unwrap(), &w);
        mask_err = mask_err.max((full - split).abs() / full.abs());
        let gm = loglik_grad_w(&apply_mask(g, &left).unwrap(), &w);
        let gf = loglik_grad_w(g, &w);
        for p in 0..g.n_px() {
            for j in 0..g.q {
                let expect = if left.contains(&p) { 0.0 } else { gf[(p, j)] };
                if gm[(p, j)] != expect {
                    problems.push(format!("masked gradient wrong at ({p},{j})"));
                }
            }
        }
    }
    if mask_err > 1e-13 {
        problems.push(format!("masking split error {mask_err:.2e}"));
    }
    if problems.is_empty() {
        outcome(
            true,
            format!(
                "sign flips bit-exact, permutation error {perm_err:.1e}, mass conserved, masking split error {mask_err:.1e}"
            ),
        )
    } else {
        problems.truncate(5);
        outcome(false, problems.join("; "))
    }
}

// ---- A8 ---------------------------------------------------------------------

fn a8_diagnostics() -> Outcome {
    let mut r = rng(88);
    let iid: Vec<Vec<f64>> = (0..4).map(|_| (0..1000).map(|_| normal(&mut r)).collect()).collect();
    let rh = rhat(&iid).unwrap();
    let ess = bulk_ess(&iid).unwrap();
    let iid_ok = (0.999..=1.01).contains(&rh) && (ess - 4000.0).abs() <= 0.2 * 4000.0;

    let rho: f64 = 0.9;
    let ar: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut x = normal(&mut r) / (1.0 - rho * rho).sqrt();
            (0..5000)
                .map(|_| {
                    x = rho * x + normal(&mut r);
                    x
                })
                .collect()
        })
        .collect();
    let ess_ar = bulk_ess(&ar).unwrap();
    let theory = 20_000.0 * (1.0 - rho) / (1.0 + rho);
    let ar_ok = ess_ar > theory / 1.5 && ess_ar < theory * 1.5;

    // WAIC against arithmetic spelled out by hand
    let table: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| -1.0 - normal(&mut r).abs()).collect()).collect();
    let w = waic(&table).unwrap();
    let (mut lppd, mut pw) = (0.0, 0.0);
    for c in 0..5 {
        let col: Vec<f64> = table.iter().map(|row| row[c]).collect();
        let s = col.len() as f64;
        lppd += (col.iter().map(|x| x.exp()).sum::<f64>() / s).ln();
        let mean = col.iter().sum::<f64>() / s;
        pw += col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s - 1.0);
    }
    let expect = -2.0 * (lppd - pw);
    let waic_err = (w.lppd - lppd).abs().max((w.p_waic - pw).abs()).max((w.waic - expect).abs());
    let waic_ok = waic_err < 1e-10;

    outcome(
        iid_ok && ar_ok && waic_ok,
        format!(
            "iid R-hat {rh:.4} in [0.999, 1.01], ESS {ess:.0} vs 4000 (+-20%); AR(1) ESS {ess_ar:.0} vs {theory:.0} (x1.5); WAIC error {waic_err:.1e}"
        ),
    )
}

// ---- A9 ---------------------------------------------------------------------

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn a9_determinism() -> Outcome {
    let cfg = SimConfig {
        n_images: 4,
        n_x: 8,
        n_y: 8,
        seed: 9,
        ..SimConfig::default()
    };
    let (grids, _) = simulate_dataset(&cfg).unwrap();
    let data = Dataset::new(grids, cfg.labels()).unwrap();
    let sampler = SamplerConfig {
        n_iter: 300,
        n_burn: 150,
        chains: 3,
        seed: 9,
        tile: TILE,
        loglik_thin: 5,
        ..SamplerConfig::default()
    };
    let root = tempfile::tempdir().unwrap();
    let mut stores = Vec::new();
    for threads in [1, 2, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let store = pool.install(|| run_chain(&data, &sampler)).unwrap();
        let dir = root.path().join(format!("t{threads}"));
        write_store(&dir, &store).unwrap();
        stores.push(dir);
    }
    let names = files_under(&stores[0]);
    let mut differing = Vec::new();
    for other in &stores[1..] {
        if files_under(other) != names {
            differing.push(format!("{} has a different file list", other.display()));
        }
        for name in &names {
            if fs::read(stores[0].join(name)).unwrap() != fs::read(other.join(name)).ok().unwrap_or_default() {
                differing.push(name.display().to_string());
            }
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} store files byte-identical across 1, 2 and 8 threads", names.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ---- A10 --------------------------------------------------------------------

/// Sample mean and variance of one trace.
fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Covariance of the meshed GP at `phi`, `L L'` with `L e_j` the field
/// coloured from the `j`-th unit innovation.
fn mgp_covariance(mesh: &MeshGraph, coords: &[[f64; 2]], phi: f64) -> DMatrix<f64> {
    let n = coords.len();
    let factors = compute_factors(mesh, coords, phi).unwrap();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        l.set_column(j, &DVector::from_vec(sample_prior_from_normals(&factors, mesh, &e)));
    }
    &l * l.transpose()
}

fn a10_prior_recovery() -> Outcome {
    let (q, k, burn, draws) = (2, 2, 5_000, 50_000);
    let grid = GridSpec::new(3, 3, 1.0, (1.0, 1.0)).unwrap();
    let mut g = CountGrid::zeros("masked", grid, q);
    g.mask.iter_mut().for_each(|m| *m = false);
    let data = Dataset::new(vec![g], vec!["a".into(), "b".into()]).unwrap();
    let cfg = SamplerConfig {
        n_iter: burn + draws,
        n_burn: burn,
        k,
        tile: (2, 2),
        seed: 10,
        ..SamplerConfig::default()
    };
    let prior_var = cfg.prior_var;
    let (lo, hi) = cfg.phi_bounds;
    let s = Sampler::new(&data, cfg).unwrap();
    let mut st = s.init_state(0).unwrap();
    for _ in 0..burn {
        s.sweep(&mut st, Updates::ALL);
    }
    let free = [(0, 0), (1, 0), (1, 1)];
    let mut scalars: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); free.len() + q];
    let mut phi_sum = 0.0;
    let n_px = 9;
    let mut sum = vec![DVector::<f64>::zeros(n_px); k];
    let mut outer = vec![DMatrix::<f64>::zeros(n_px, n_px); k];
    for _ in 0..draws {
        s.sweep(&mut st, Updates::ALL);
        for (t, &(j, c)) in free.iter().enumerate() {
            scalars[t].push(st.params.a.get(j, c));
        }
        for j in 0..q {
            scalars[free.len() + j].push(st.params.alpha[0][j]);
        }
        phi_sum += st.params.phi.phi.iter().sum::<f64>();
        for r in 0..k {
            let col = st.latents.v[0].column(r).into_owned();
            outer[r] += &col * col.transpose();
            sum[r] += col;
        }
    }

    let mut worst_var = 0.0_f64;
    let mut worst_mean = 0.0_f64;
    for x in &scalars {
        let (m, v) = moments(x);
        worst_var = worst_var.max((v / prior_var - 1.0).abs());
        worst_mean = worst_mean.max(m.abs() / prior_var.sqrt());
    }

    // expected field covariance, averaging the meshed GP over phi ~ U(lo, hi) by Simpson's rule
    let intervals = 400;
    let step = (hi - lo) / intervals as f64;
    let mut expect = DMatrix::zeros(n_px, n_px);
    for t in 0..=intervals {
        let w = if t == 0 || t == intervals {
            1.0
        } else if t % 2 == 1 {
            4.0
        } else {
            2.0
        };
        expect += mgp_covariance(s.mesh(), s.coords(), lo + t as f64 * step) * (w * step / 3.0);
    }
    expect /= hi - lo;
    let n = draws as f64;
    let mut worst_cov = 0.0_f64;
    for r in 0..k {
        let mean = &sum[r] / n;
        let cov = (&outer[r] - &mean * mean.transpose() * n) / (n - 1.0);
        worst_cov = worst_cov.max((cov - &expect).norm() / expect.norm());
    }
    outcome(
        worst_var < 0.1 && worst_mean < 0.1 && worst_cov < 0.1,
        format!(
            "{draws} draws: loadings/offset variance error {:.1}%, mean {:.3} prior sd, field covariance Frobenius error {:.1}% (all < 10%); mean decay {:.2} vs {:.2}",
            100.0 * worst_var,
            worst_mean,
            100.0 * worst_cov,
            phi_sum / (n * k as f64),
            0.5 * (lo + hi)
        ),
    )
}
