//! On-disk formats: counts and point CSVs, grid manifests, draw stores,
//! truth records, curve and diagnostic tables.
//!
//! Every CSV written here starts with `# config_hash=...` and `# seed=...`
//! comment lines; readers skip lines starting with `#`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{ChainDraws, ChainSummary, CorrelationCurve, Draw, DrawsStore, StoreMeta, Waic};
use crate::likelihood::MAX_PIXEL_COUNT;
use crate::preprocess::{CountGrid, GridSpec, Point};
use crate::simulate::TruthRecord;
use crate::{Error, Result};

/// Hex SHA-256 of the JSON serialisation of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn format_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        row,
        msg: msg.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_writer(path: &Path, hash: &str, seed: u64) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = create(path)?;
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "# seed={seed}")?;
    Ok(csv::Writer::from_writer(w))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// Row number as a user sees it in the file (header is row 1).
fn row_of(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

// ---- points ----------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct PointRow {
    image_id: String,
    x: f64,
    y: f64,
    cell_type: String,
}

/// Reads `image_id,x,y,cell_type` rows grouped by image id (sorted).
pub fn read_points_csv(path: &Path) -> Result<BTreeMap<String, Vec<Point>>> {
    Ok(read_points_csv_rows(path)?
        .into_iter()
        .map(|(id, pts)| (id, pts.into_iter().map(|(_, p)| p).collect()))
        .collect())
}

/// As [`read_points_csv`], keeping each point's row number in the file.
pub fn read_points_csv_rows(path: &Path) -> Result<BTreeMap<String, Vec<(usize, Point)>>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let mut out: BTreeMap<String, Vec<(usize, Point)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, i + 2, e.to_string()))?;
        let row = row_of(&rec, i + 2);
        let r: PointRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| format_err(path, row, e.to_string()))?;
        if !(r.x.is_finite() && r.y.is_finite()) {
            return Err(format_err(path, row, "non-finite coordinate"));
        }
        out.entry(r.image_id).or_default().push((
            row,
            Point {
                x: r.x,
                y: r.y,
                cell_type: r.cell_type,
            },
        ));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct ExtentRow {
    image_id: String,
    l_x: f64,
    l_y: f64,
}

/// Reads `image_id,l_x,l_y` rows (microns).
pub fn read_extents_csv(path: &Path) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, i + 2, e.to_string()))?;
        let row = row_of(&rec, i + 2);
        let r: ExtentRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| format_err(path, row, e.to_string()))?;
        if !(r.l_x > 0.0 && r.l_y > 0.0 && r.l_x.is_finite() && r.l_y.is_finite()) {
            return Err(format_err(path, row, "extent must be positive and finite"));
        }
        if out.insert(r.image_id.clone(), (r.l_x, r.l_y)).is_some() {
            return Err(format_err(path, row, format!("duplicate image {:?}", r.image_id)));
        }
    }
    Ok(out)
}

pub fn write_points_csv(path: &Path, patterns: &BTreeMap<String, Vec<Point>>, hash: &str, seed: u64) -> Result<()> {
    let mut w = csv_writer(path, hash, seed)?;
    w.write_record(["image_id", "x", "y", "cell_type"])?;
    for (id, pts) in patterns {
        for p in pts {
            w.write_record([id.as_str(), &p.x.to_string(), &p.y.to_string(), &p.cell_type])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---- counts ----------------------------------------------------------------

/// Grid, labels and mask accompanying a counts table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: GridSpec,
    pub labels: Vec<String>,
    pub image_ids: Vec<String>,
    /// Unobserved pixels per image.
    pub masked: BTreeMap<String, Vec<usize>>,
    pub config_hash: String,
    pub seed: u64,
}

impl Manifest {
    pub fn from_grids(grids: &[CountGrid], labels: &[String], hash: &str, seed: u64) -> Result<Self> {
        let first = grids.first().ok_or(Error::EmptyDataset)?;
        let masked = grids
            .iter()
            .filter(|g| g.mask.iter().any(|m| !m))
            .map(|g| {
                let missing = (0..g.n_px()).filter(|&p| !g.mask[p]).collect();
                (g.image_id.clone(), missing)
            })
            .collect();
        Ok(Self {
            grid: first.grid,
            labels: labels.to_vec(),
            image_ids: grids.iter().map(|g| g.image_id.clone()).collect(),
            masked,
            config_hash: hash.to_owned(),
            seed,
        })
    }
}

/// Writes the nonzero cells as `image_id,px,py,cell_type,count`.
pub fn write_counts_csv(path: &Path, grids: &[CountGrid], labels: &[String], hash: &str, seed: u64) -> Result<()> {
    let mut w = csv_writer(path, hash, seed)?;
    w.write_record(["image_id", "px", "py", "cell_type", "count"])?;
    for g in grids {
        for p in 0..g.n_px() {
            let (px, py) = g.grid.pixel_xy(p);
            for (j, label) in labels.iter().enumerate() {
                let c = g.count(p, j);
                if c > 0 {
                    w.write_record([
                        g.image_id.as_str(),
                        &px.to_string(),
                        &py.to_string(),
                        label,
                        &c.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CountRow {
    image_id: String,
    px: usize,
    py: usize,
    cell_type: String,
    count: u64,
}

/// Rebuilds count grids from a counts table and its manifest. Missing
/// cells are zero.
pub fn read_counts_csv(path: &Path, manifest: &Manifest) -> Result<Vec<CountGrid>> {
    manifest.grid.validate()?;
    let q = manifest.labels.len();
    let label_ix: BTreeMap<&str, usize> = manifest
        .labels
        .iter()
        .enumerate()
        .map(|(j, l)| (l.as_str(), j))
        .collect();
    let mut grids: Vec<CountGrid> = manifest
        .image_ids
        .iter()
        .map(|id| CountGrid::zeros(id.clone(), manifest.grid, q))
        .collect();
    let image_ix: BTreeMap<&str, usize> = manifest
        .image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, i + 2, e.to_string()))?;
        let row = row_of(&rec, i + 2);
        let r: CountRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| format_err(path, row, e.to_string()))?;
        let gi = *image_ix
            .get(r.image_id.as_str())
            .ok_or_else(|| format_err(path, row, format!("image {:?} not in manifest", r.image_id)))?;
        let j = *label_ix
            .get(r.cell_type.as_str())
            .ok_or_else(|| format_err(path, row, format!("unknown cell type {:?}", r.cell_type)))?;
        if r.px >= manifest.grid.n_x || r.py >= manifest.grid.n_y {
            return Err(format_err(path, row, format!("pixel ({}, {}) outside the grid", r.px, r.py)));
        }
        if r.count > u64::from(MAX_PIXEL_COUNT) {
            return Err(format_err(path, row, format!("count {} exceeds {MAX_PIXEL_COUNT}", r.count)));
        }
        let p = manifest.grid.pixel_index(r.px, r.py);
        let cell = grids[gi].count_mut(p, j);
        // counts fit in u32 after the range check above
        *cell = cell
            .checked_add(r.count as u32)
            .filter(|c| *c <= MAX_PIXEL_COUNT)
            .ok_or_else(|| format_err(path, row, "accumulated count too large"))?;
    }
    for (id, missing) in &manifest.masked {
        let gi = *image_ix
            .get(id.as_str())
            .ok_or_else(|| Error::Config(format!("masked image {id:?} not in manifest")))?;
        for &p in missing {
            if p >= manifest.grid.n_px() {
                return Err(Error::InvalidGrid(format!("masked pixel {p} out of range")));
            }
            grids[gi].mask[p] = false;
        }
    }
    Ok(grids)
}

// ---- draws -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    meta: StoreMeta,
    chains: Vec<ChainHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainHeader {
    chain: usize,
    n_draws: usize,
    summary: ChainSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikHeader {
    pub n_draws: usize,
    pub n_obs: usize,
    pub iterations: Vec<usize>,
    pub labels: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
}

/// Writes `store.json` plus `chain_<c>/draws.csv`, `chain_<c>/loglik.bin`
/// and `chain_<c>/loglik.json` under `dir`.
pub fn write_store(dir: &Path, store: &DrawsStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = &store.meta;
    let header = StoreHeader {
        meta: meta.clone(),
        chains: store
            .chains
            .iter()
            .map(|c| ChainHeader {
                chain: c.chain,
                n_draws: c.draws.len(),
                summary: c.summary.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("store.json"), &header)?;
    for c in &store.chains {
        let cdir = dir.join(format!("chain_{}", c.chain));
        let mut w = csv_writer(&cdir.join("draws.csv"), &meta.config_hash, meta.seed)?;
        w.write_record(["param", "index", "iteration", "value"])?;
        for d in &c.draws {
            let it = d.iteration.to_string();
            for (name, vals) in [("A", &d.a), ("B", &d.b), ("alpha", &d.alpha), ("phi", &d.phi)] {
                for (ix, v) in vals.iter().enumerate() {
                    w.write_record([name, &ix.to_string(), &it, &v.to_string()])?;
                }
            }
        }
        w.flush()?;

        let mut bin = create(&cdir.join("loglik.bin"))?;
        for row in &c.loglik {
            for v in row {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        bin.flush()?;
        write_json(
            &cdir.join("loglik.json"),
            &LoglikHeader {
                n_draws: c.loglik.len(),
                n_obs: meta.n_obs,
                iterations: c.loglik_iterations.clone(),
                labels: meta.labels.clone(),
                seed: meta.seed,
                config_hash: meta.config_hash.clone(),
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct DrawRow {
    param: String,
    index: usize,
    iteration: usize,
    value: f64,
}

fn read_chain(dir: &Path, meta: &StoreMeta, h: &ChainHeader) -> Result<ChainDraws> {
    let cdir = dir.join(format!("chain_{}", h.chain));
    let path = cdir.join("draws.csv");
    let sizes = [
        ("A", meta.q * meta.k),
        ("B", meta.p * meta.q),
        ("alpha", meta.n_subjects * meta.q),
        ("phi", meta.k),
    ];
    let mut draws: Vec<Draw> = Vec::with_capacity(h.n_draws);
    let mut rdr = csv_reader(&path)?;
    let headers = rdr.headers()?.clone();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(&path, i + 2, e.to_string()))?;
        let row = row_of(&rec, i + 2);
        let r: DrawRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| format_err(&path, row, e.to_string()))?;
        if draws.last().is_none_or(|d| d.iteration != r.iteration) {
            draws.push(Draw {
                iteration: r.iteration,
                a: vec![f64::NAN; sizes[0].1],
                b: vec![f64::NAN; sizes[1].1],
                alpha: vec![f64::NAN; sizes[2].1],
                phi: vec![f64::NAN; sizes[3].1],
            });
        }
        let d = draws.last_mut().expect("pushed above");
        let target = match r.param.as_str() {
            "A" => &mut d.a,
            "B" => &mut d.b,
            "alpha" => &mut d.alpha,
            "phi" => &mut d.phi,
            other => return Err(format_err(&path, row, format!("unknown parameter {other:?}"))),
        };
        let slot = target
            .get_mut(r.index)
            .ok_or_else(|| format_err(&path, row, format!("index {} out of range", r.index)))?;
        *slot = r.value;
    }
    if draws.len() != h.n_draws {
        return Err(Error::LengthMismatch {
            left: h.n_draws,
            right: draws.len(),
        });
    }
    if draws
        .iter()
        .any(|d| d.a.iter().chain(&d.b).chain(&d.alpha).chain(&d.phi).any(|v| v.is_nan()))
    {
        return Err(format_err(&path, 0, "a draw is missing parameter entries"));
    }

    let lh: LoglikHeader = read_json(&cdir.join("loglik.json"))?;
    let mut bytes = Vec::new();
    File::open(cdir.join("loglik.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() != lh.n_draws * lh.n_obs * 8 {
        return Err(Error::LengthMismatch {
            left: lh.n_draws * lh.n_obs * 8,
            right: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let loglik = if lh.n_obs == 0 {
        vec![Vec::new(); lh.n_draws]
    } else {
        values.chunks(lh.n_obs).map(<[f64]>::to_vec).collect()
    };
    Ok(ChainDraws {
        chain: h.chain,
        draws,
        loglik,
        loglik_iterations: lh.iterations,
        summary: h.summary.clone(),
    })
}

pub fn read_store(dir: &Path) -> Result<DrawsStore> {
    let header: StoreHeader = read_json(&dir.join("store.json"))?;
    let chains = header
        .chains
        .iter()
        .map(|h| read_chain(dir, &header.meta, h))
        .collect::<Result<_>>()?;
    Ok(DrawsStore {
        meta: header.meta,
        chains,
    })
}

// ---- truth, curves, diagnostics ----------------------------------------------

pub fn write_truth(path: &Path, truth: &TruthRecord) -> Result<()> {
    write_json(path, truth)
}

pub fn read_truth(path: &Path) -> Result<TruthRecord> {
    read_json(path)
}

pub fn write_curves_csv(path: &Path, curves: &[CorrelationCurve], hash: &str, seed: u64) -> Result<()> {
    let mut w = csv_writer(path, hash, seed)?;
    w.write_record(["pair_r", "pair_s", "h_microns", "mean", "lo95", "hi95"])?;
    for c in curves {
        for t in 0..c.h_microns.len() {
            w.write_record([
                c.pair.0.to_string(),
                c.pair.1.to_string(),
                c.h_microns[t].to_string(),
                c.mean[t].to_string(),
                c.lo95[t].to_string(),
                c.hi95[t].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub pair_r: usize,
    pub pair_s: usize,
    pub h_microns: f64,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| format_err(path, i + 2, e.to_string()))?;
            let row = row_of(&rec, i + 2);
            rec.deserialize(Some(&headers))
                .map_err(|e| format_err(path, row, e.to_string()))
        })
        .collect()
}

/// `k,lppd,p_waic,waic` rows of a sweep over the number of factors.
pub fn write_waic_table(path: &Path, rows: &[(usize, Waic)], hash: &str, seed: u64) -> Result<()> {
    let mut w = csv_writer(path, hash, seed)?;
    w.write_record(["k", "lppd", "p_waic", "waic"])?;
    for (k, x) in rows {
        w.write_record([k.to_string(), x.lppd.to_string(), x.p_waic.to_string(), x.waic.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub quantity: String,
    pub pair_r: usize,
    pub pair_s: usize,
    pub h_microns: f64,
    /// `NaN` marks an undefined diagnostic (for example a constant chain).
    pub value: f64,
}

pub fn write_diagnostics_csv(path: &Path, rows: &[DiagnosticRow], hash: &str, seed: u64) -> Result<()> {
    let mut w = csv_writer(path, hash, seed)?;
    w.write_record(["quantity", "pair_r", "pair_s", "h_microns", "value"])?;
    for r in rows {
        w.write_record([
            r.quantity.clone(),
            r.pair_r.to_string(),
            r.pair_s.to_string(),
            r.h_microns.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicRecord {
    #[serde(flatten)]
    pub waic: Waic,
    pub n_draws: usize,
    pub n_obs: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub fn write_waic_json(path: &Path, record: &WaicRecord) -> Result<()> {
    write_json(path, record)
}
