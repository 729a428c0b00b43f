use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use log::info;

use meshlgcp::diagnostics::{
    bulk_ess, cross_pairs, curve_chains, default_h_grid, diff_curves, rhat, waic, CorrelationCurve, DrawsStore, Waic,
};
use meshlgcp::io::{
    read_counts_csv, read_extents_csv, read_json, read_points_csv_rows, read_store, write_counts_csv,
    write_curves_csv, write_diagnostics_csv, write_json, write_store, write_truth, write_waic_json, write_waic_table,
    DiagnosticRow, Manifest, WaicRecord,
};
use meshlgcp::preprocess::{bin_dataset, PointPattern};
use meshlgcp::sampler::{run_chain, Dataset, SamplerConfig};
use meshlgcp::simulate::simulate_dataset;
use meshlgcp::Error;

use crate::config::RunConfig;

pub fn bin(cfg: &RunConfig, points: &Path, extents: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let rows = read_points_csv_rows(points)?;
    let extents = extents.map(read_extents_csv).transpose()?;
    let mut patterns = Vec::with_capacity(rows.len());
    for (id, pts) in rows {
        let pattern = match &extents {
            Some(table) => {
                let &(lx, ly) = table
                    .get(&id)
                    .ok_or_else(|| Error::Config(format!("no extent for image {id:?}")))?;
                for (row, p) in &pts {
                    if !(p.x >= 0.0 && p.x <= lx && p.y >= 0.0 && p.y <= ly) {
                        return Err(Error::Format {
                            path: points.display().to_string(),
                            row: *row,
                            msg: format!("point ({}, {}) outside the {lx} x {ly} extent of image {id:?}", p.x, p.y),
                        }
                        .into());
                    }
                }
                PointPattern::new(id, pts.into_iter().map(|(_, p)| p).collect(), (lx, ly))
            }
            None => PointPattern::from_bounding_box(id, pts.into_iter().map(|(_, p)| p).collect())?,
        };
        patterns.push(pattern);
    }
    let (grids, labels, grid) = bin_dataset(&patterns, cfg.bin.pixel_microns)?;
    let hash = cfg.hash()?;
    let seed = cfg.sampler.seed;
    write_counts_csv(&out.join("counts.csv"), &grids, &labels, &hash, seed)?;
    write_json(&out.join("manifest.json"), &Manifest::from_grids(&grids, &labels, &hash, seed)?)?;
    info!("binned {} images on a {}x{} grid", grids.len(), grid.n_x, grid.n_y);
    Ok(())
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (grids, mut truth) = simulate_dataset(&cfg.simulate)?;
    let hash = cfg.hash()?;
    let seed = cfg.simulate.seed;
    truth.config_hash.clone_from(&hash);
    let labels = cfg.simulate.labels();
    write_counts_csv(&out.join("counts.csv"), &grids, &labels, &hash, seed)?;
    write_json(&out.join("manifest.json"), &Manifest::from_grids(&grids, &labels, &hash, seed)?)?;
    write_truth(&out.join("truth.json"), &truth)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    let manifest: Manifest =
        read_json(&dir.join("manifest.json")).with_context(|| format!("reading {}/manifest.json", dir.display()))?;
    let grids = read_counts_csv(&dir.join("counts.csv"), &manifest)?;
    Ok(Dataset::new(grids, manifest.labels)?)
}

fn stamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Runs the sampler and writes the store plus a timestamped `run.log`.
fn fit_to(data: &Dataset, sampler: &SamplerConfig, hash: &str, out: &Path) -> anyhow::Result<DrawsStore> {
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("run.log"))?);
    writeln!(log, "{} start config_hash={hash} seed={}", stamp(), sampler.seed)?;
    writeln!(
        log,
        "{} k={} tile={}x{} chains={} n_iter={} n_burn={} thin={}",
        stamp(),
        sampler.k,
        sampler.tile.0,
        sampler.tile.1,
        sampler.chains,
        sampler.n_iter,
        sampler.n_burn,
        sampler.thin
    )?;
    log.flush()?;
    let t0 = Instant::now();
    let result = run_chain(data, sampler);
    let store = match result {
        Ok(s) => s,
        Err(e) => {
            writeln!(log, "{} failed: {e}", stamp())?;
            return Err(e.into());
        }
    };
    for c in &store.chains {
        let s = &c.summary;
        writeln!(
            log,
            "{} chain {}: draws={} phi_accept={:?} phi_whitened_accept={:?} row_accept={:?} latent_accept={:.3} alpha_accept={:.3} clamp_events={} nonfinite_events={}",
            stamp(),
            c.chain,
            c.draws.len(),
            s.phi_accept_rate,
            s.phi_whitened_accept_rate,
            s.row_accept_rate,
            s.latent_accept_rate,
            s.alpha_accept_rate,
            s.clamp_events,
            s.nonfinite_events
        )?;
    }
    write_store(out, &store)?;
    writeln!(log, "{} done in {:.1} s", stamp(), t0.elapsed().as_secs_f64())?;
    log.flush()?;
    Ok(store)
}

pub fn fit(cfg: &RunConfig, data: &Path, out: &Path) -> anyhow::Result<()> {
    let dataset = load_dataset(data)?;
    fit_to(&dataset, &cfg.sampler, &cfg.hash()?, out)?;
    Ok(())
}

/// Every pair `r <= s`, marginal curves included.
fn all_pairs(q: usize) -> Vec<(usize, usize)> {
    (0..q).flat_map(|r| (r..q).map(move |s| (r, s))).collect()
}

fn h_grid(cfg: &RunConfig, store: &DrawsStore) -> Vec<f64> {
    default_h_grid(store.meta.extent, cfg.curves.h_points)
}

pub fn xcorr(cfg: &RunConfig, store: &Path, out: &Path) -> anyhow::Result<()> {
    let store = read_store(store)?;
    let h = h_grid(cfg, &store);
    let curves = all_pairs(store.meta.q)
        .into_iter()
        .map(|pair| meshlgcp::diagnostics::xcorr_summary(&store, pair, &h))
        .collect::<meshlgcp::Result<Vec<CorrelationCurve>>>()?;
    write_curves_csv(out, &curves, &cfg.hash()?, cfg.sampler.seed)?;
    Ok(())
}

fn store_waic(store: &DrawsStore) -> meshlgcp::Result<Waic> {
    let rows = store.loglik_rows();
    if rows.is_empty() {
        return Err(Error::Config("store has no pointwise log-likelihood draws".into()));
    }
    waic(&rows)
}

pub fn diagnose(cfg: &RunConfig, store_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let store = read_store(store_dir)?;
    let h = h_grid(cfg, &store);
    let mut rows = Vec::new();
    for pair in cross_pairs(store.meta.q) {
        for &hu in &h {
            // undefined diagnostics (short or constant chains, zero loadings rows) are NaN
            let (r, e) = match curve_chains(&store, pair, hu) {
                Ok(chains) => (rhat(&chains).unwrap_or(f64::NAN), bulk_ess(&chains).unwrap_or(f64::NAN)),
                Err(_) => (f64::NAN, f64::NAN),
            };
            for (quantity, value) in [("rhat", r), ("bulk_ess", e)] {
                rows.push(DiagnosticRow {
                    quantity: quantity.into(),
                    pair_r: pair.0,
                    pair_s: pair.1,
                    h_microns: hu * store.meta.l_star,
                    value,
                });
            }
        }
    }
    let hash = cfg.hash()?;
    let seed = cfg.sampler.seed;
    fs::create_dir_all(out)?;
    write_diagnostics_csv(&out.join("diagnostics.csv"), &rows, &hash, seed)?;
    let w = store_waic(&store)?;
    write_waic_json(
        &out.join("waic.json"),
        &WaicRecord {
            waic: w,
            n_draws: store.loglik_rows().len(),
            n_obs: store.meta.n_obs,
            config_hash: hash,
            seed,
        },
    )?;
    Ok(())
}

pub fn sweep_k(cfg: &RunConfig, data: &Path, ks: &[usize], out: &Path) -> anyhow::Result<()> {
    if ks.is_empty() {
        return Err(Error::Config("--sweep-k needs at least one value".into()).into());
    }
    let dataset = load_dataset(data)?;
    let hash = cfg.hash()?;
    let mut table = Vec::with_capacity(ks.len());
    for &k in ks {
        let sampler = SamplerConfig { k, ..cfg.sampler.clone() };
        sampler.validate()?;
        let store = fit_to(&dataset, &sampler, &hash, &out.join(format!("k{k}")))?;
        table.push((k, store_waic(&store)?));
    }
    write_waic_table(&out.join("waic_sweep.csv"), &table, &hash, cfg.sampler.seed)?;
    Ok(())
}

pub fn compare(cfg: &RunConfig, a: &Path, b: &Path, out: &Path) -> anyhow::Result<()> {
    let sa = read_store(a)?;
    let sb = read_store(b)?;
    let h = h_grid(cfg, &sa);
    let curves = all_pairs(sa.meta.q)
        .into_iter()
        .map(|pair| diff_curves(&sa, &sb, pair, &h))
        .collect::<meshlgcp::Result<Vec<_>>>()?;
    write_curves_csv(out, &curves, &cfg.hash()?, cfg.sampler.seed)?;
    Ok(())
}
