//! Meshed (DAG-block) Gaussian process.
//!
//! The domain is partitioned into blocks; each block `s` conditions on the
//! pixels of its parent blocks `[s]`, so for a zero-mean field `v`
//!
//! ```text
//! p(v) = prod_s N(v_s; H_s v_[s], R_s)
//! H_s  = C_s,[s] C_[s],[s]^-1
//! R_s  = C_s,s - H_s C_[s],s
//! ```
//!
//! With every preceding block as a parent this is exactly the dense GP.

use std::collections::HashMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::kernel::exp_gram;
use crate::preprocess::GridSpec;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshGraph {
    n_px: usize,
    blocks: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
    /// For block `c` and its `i`-th parent, where that parent's pixels start
    /// inside the concatenated parent pixel vector of `c`.
    parent_offsets: Vec<Vec<usize>>,
    parent_pixels: Vec<Vec<usize>>,
}

impl MeshGraph {
    /// Validates a partition plus parent lists and derives the topological order.
    pub fn from_parts(n_px: usize, blocks: Vec<Vec<usize>>, parents: Vec<Vec<usize>>) -> Result<Self> {
        let m = blocks.len();
        if m == 0 {
            return Err(Error::InvalidMesh("no blocks".into()));
        }
        if parents.len() != m {
            return Err(Error::InvalidMesh(format!(
                "{m} blocks but {} parent lists",
                parents.len()
            )));
        }
        let mut seen = vec![false; n_px];
        for (b, pixels) in blocks.iter().enumerate() {
            if pixels.is_empty() {
                return Err(Error::InvalidMesh(format!("block {b} is empty")));
            }
            for &p in pixels {
                if p >= n_px || seen[p] {
                    return Err(Error::InvalidMesh(format!(
                        "pixel {p} out of range or in two blocks"
                    )));
                }
                seen[p] = true;
            }
        }
        let mut children = vec![Vec::new(); m];
        for (b, ps) in parents.iter().enumerate() {
            for &p in ps {
                if p >= m || p == b {
                    return Err(Error::InvalidMesh(format!("block {b} has bad parent {p}")));
                }
                children[p].push(b);
            }
        }
        // Kahn's algorithm, smallest ready id first
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut ready: std::collections::BTreeSet<usize> =
            (0..m).filter(|&b| indeg[b] == 0).collect();
        let mut topo_order = Vec::with_capacity(m);
        while let Some(b) = ready.pop_first() {
            topo_order.push(b);
            for &c in &children[b] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if topo_order.len() != m {
            return Err(Error::InvalidMesh("parent relation has a cycle".into()));
        }
        let parent_offsets = parents
            .iter()
            .map(|ps| {
                let mut off = 0;
                ps.iter()
                    .map(|&p| {
                        let o = off;
                        off += blocks[p].len();
                        o
                    })
                    .collect()
            })
            .collect();
        let parent_pixels = parents
            .iter()
            .map(|ps| ps.iter().flat_map(|&p| blocks[p].iter().copied()).collect())
            .collect();
        Ok(Self {
            n_px,
            blocks,
            parents,
            children,
            topo_order,
            parent_offsets,
            parent_pixels,
        })
    }

    /// Each block conditions on every block with a smaller id.
    pub fn with_full_parents(n_px: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let parents = (0..blocks.len()).map(|b| (0..b).collect()).collect();
        Self::from_parts(n_px, blocks, parents)
    }

    pub fn n_px(&self) -> usize {
        self.n_px
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, s: usize) -> &[usize] {
        &self.blocks[s]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn parents(&self, s: usize) -> &[usize] {
        &self.parents[s]
    }

    pub fn children(&self, s: usize) -> &[usize] {
        &self.children[s]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Start of parent `parent` inside the parent pixel vector of `child`.
    pub fn parent_offset(&self, child: usize, parent: usize) -> Option<usize> {
        self.parents[child]
            .iter()
            .position(|&p| p == parent)
            .map(|i| self.parent_offsets[child][i])
    }

    /// Concatenated pixels of the parents of `s`, in parent-list order.
    pub fn parent_pixels(&self, s: usize) -> &[usize] {
        &self.parent_pixels[s]
    }

    /// Drops unobserved pixels. Blocks shrink; empty blocks disappear and
    /// their children inherit the removed block's parents.
    pub fn restrict(&self, observed: &[bool]) -> Result<Self> {
        if observed.len() != self.n_px {
            return Err(Error::Shape(format!(
                "mask of length {} for {} pixels",
                observed.len(),
                self.n_px
            )));
        }
        let m = self.blocks.len();
        let shrunk: Vec<Vec<usize>> = self
            .blocks
            .iter()
            .map(|b| b.iter().copied().filter(|&p| observed[p]).collect())
            .collect();
        // effective parents in old ids, resolved in topological order
        let mut effective: Vec<Vec<usize>> = vec![Vec::new(); m];
        for &b in &self.topo_order {
            let mut eff = Vec::new();
            for &p in &self.parents[b] {
                if shrunk[p].is_empty() {
                    for &g in &effective[p] {
                        if !eff.contains(&g) {
                            eff.push(g);
                        }
                    }
                } else if !eff.contains(&p) {
                    eff.push(p);
                }
            }
            effective[b] = eff;
        }
        let mut new_id = vec![usize::MAX; m];
        let mut next = 0;
        for b in 0..m {
            if !shrunk[b].is_empty() {
                new_id[b] = next;
                next += 1;
            }
        }
        if next == 0 {
            return Err(Error::InvalidMesh("every pixel is missing".into()));
        }
        let mut blocks = Vec::with_capacity(next);
        let mut parents = Vec::with_capacity(next);
        for b in 0..m {
            if new_id[b] != usize::MAX {
                blocks.push(shrunk[b].clone());
                parents.push(effective[b].iter().map(|&p| new_id[p]).collect());
            }
        }
        Self::from_parts(self.n_px, blocks, parents)
    }
}

fn split_points(n: usize, tile: usize) -> Vec<usize> {
    let n_tiles = n.div_ceil(tile);
    (0..=n_tiles).map(|t| t * n / n_tiles).collect()
}

/// Row-major tiling of the grid into tiles of at most `tile.0 x tile.1`
/// pixels; each tile's parents are its west and south neighbours.
pub fn build_mesh(grid: &GridSpec, tile: (usize, usize)) -> Result<MeshGraph> {
    if grid.n_x == 0 || grid.n_y == 0 {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    if tile.0 == 0 || tile.1 == 0 {
        return Err(Error::Config(format!("tile {tile:?} must be at least 1x1")));
    }
    let xs = split_points(grid.n_x, tile.0);
    let ys = split_points(grid.n_y, tile.1);
    let (ntx, nty) = (xs.len() - 1, ys.len() - 1);
    let mut blocks = Vec::with_capacity(ntx * nty);
    let mut parents = Vec::with_capacity(ntx * nty);
    for ty in 0..nty {
        for tx in 0..ntx {
            let mut pixels = Vec::new();
            for py in ys[ty]..ys[ty + 1] {
                for px in xs[tx]..xs[tx + 1] {
                    pixels.push(grid.pixel_index(px, py));
                }
            }
            blocks.push(pixels);
            let mut ps = Vec::new();
            if tx > 0 {
                ps.push(ty * ntx + tx - 1);
            }
            if ty > 0 {
                ps.push((ty - 1) * ntx + tx);
            }
            parents.push(ps);
        }
    }
    MeshGraph::from_parts(grid.n_px(), blocks, parents)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockFactor {
    /// `|s| x |[s]|`; zero columns for a root block.
    pub h: DMatrix<f64>,
    /// Lower Cholesky factor of `R_s`.
    pub r_chol: DMatrix<f64>,
    /// `sum log diag(r_chol)`.
    pub half_log_det: f64,
    /// Diagonal jitter that was needed, if any.
    pub jitter: f64,
}

/// H/R factors of one latent factor at one decay.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFactors {
    pub phi: f64,
    pub blocks: Vec<BlockFactor>,
    /// Blocks with equal entries have identical factors.
    pub shape: Vec<usize>,
}

fn cholesky_with_jitter(mut m: DMatrix<f64>, block: usize) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Ok((c.l(), 0.0));
    }
    for i in 0..m.nrows() {
        m[(i, i)] += JITTER;
    }
    match m.cholesky() {
        Some(c) => {
            warn!("block {block}: Cholesky needed jitter {JITTER:e}");
            Ok((c.l(), JITTER))
        }
        None => Err(Error::DegenerateBlock { block }),
    }
}

fn gather(coords: &[[f64; 2]], idx: &[usize]) -> Vec<[f64; 2]> {
    idx.iter().map(|&p| coords[p]).collect()
}

/// Offsets of a block's pixels and then its parent pixels from the block's
/// first pixel, on a fixed fine lattice.
fn geometry_key(coords: &[[f64; 2]], block: &[usize], parents: &[usize]) -> Vec<i64> {
    let anchor = coords[block[0]];
    let mut key = Vec::with_capacity(2 * (block.len() + parents.len()) + 1);
    key.push(block.len() as i64);
    for &p in block.iter().chain(parents) {
        for d in 0..2 {
            key.push(((coords[p][d] - anchor[d]) * 2f64.powi(36)).round() as i64);
        }
    }
    key
}

fn block_factor(coords: &[[f64; 2]], mesh: &MeshGraph, s: usize, phi: f64) -> Result<BlockFactor> {
    let xs = gather(coords, mesh.block(s));
    let c_ss = exp_gram(&xs, &xs, phi);
    let pp = mesh.parent_pixels(s);
    if pp.is_empty() {
        let (r_chol, jitter) = cholesky_with_jitter(c_ss, s)?;
        let half_log_det = r_chol.diagonal().iter().map(|d| d.ln()).sum();
        return Ok(BlockFactor {
            h: DMatrix::zeros(xs.len(), 0),
            r_chol,
            half_log_det,
            jitter,
        });
    }
    let xp = gather(coords, pp);
    let c_pp = exp_gram(&xp, &xp, phi);
    let c_ps = exp_gram(&xp, &xs, phi);
    let (l_pp, jit_p) = cholesky_with_jitter(c_pp, s)?;
    // H^T = C_pp^-1 C_ps
    let mut ht = c_ps.clone();
    l_pp.solve_lower_triangular_mut(&mut ht);
    l_pp.tr_solve_lower_triangular_mut(&mut ht);
    let h = ht.transpose();
    let r = &c_ss - &h * &c_ps;
    let r = (&r + r.transpose()) * 0.5;
    let (r_chol, jit_r) = cholesky_with_jitter(r, s)?;
    let half_log_det = r_chol.diagonal().iter().map(|d| d.ln()).sum();
    Ok(BlockFactor {
        h,
        r_chol,
        half_log_det,
        jitter: jit_p.max(jit_r),
    })
}

pub fn compute_factors(mesh: &MeshGraph, coords: &[[f64; 2]], phi: f64) -> Result<BlockFactors> {
    if coords.len() != mesh.n_px() {
        return Err(Error::Shape(format!(
            "{} coordinates for {} pixels",
            coords.len(),
            mesh.n_px()
        )));
    }
    // Blocks whose own and parent pixels sit at the same relative offsets
    // share H and R; on a regular grid only a handful of shapes occur.
    let mut shapes: HashMap<Vec<i64>, usize> = HashMap::new();
    let mut reps = Vec::new();
    let shape_of: Vec<usize> = (0..mesh.n_blocks())
        .map(|s| {
            let key = geometry_key(coords, mesh.block(s), mesh.parent_pixels(s));
            *shapes.entry(key).or_insert_with(|| {
                reps.push(s);
                reps.len() - 1
            })
        })
        .collect();
    let unique = reps
        .into_par_iter()
        .map(|s| block_factor(coords, mesh, s, phi))
        .collect::<Result<Vec<_>>>()?;
    let blocks = shape_of.iter().map(|&u| unique[u].clone()).collect();
    Ok(BlockFactors {
        phi,
        blocks,
        shape: shape_of,
    })
}

/// `v_s - H_s v_[s]` for block `s`.
pub fn block_residual(v: &[f64], mesh: &MeshGraph, f: &BlockFactor, s: usize) -> DVector<f64> {
    let pix = mesh.block(s);
    let mut resid = DVector::from_iterator(pix.len(), pix.iter().map(|&p| v[p]));
    if f.h.ncols() > 0 {
        let pp = mesh.parent_pixels(s);
        let vp = DVector::from_iterator(pp.len(), pp.iter().map(|&p| v[p]));
        resid -= &f.h * vp;
    }
    resid
}

/// Log-density of block `s` given its parents.
pub fn block_logdensity(v: &[f64], mesh: &MeshGraph, factors: &BlockFactors, s: usize) -> f64 {
    let f = &factors.blocks[s];
    let mut u = block_residual(v, mesh, f, s);
    f.r_chol.solve_lower_triangular_mut(&mut u);
    -0.5 * (u.len() as f64) * LN_2PI - f.half_log_det - 0.5 * u.norm_squared()
}

/// `sum_s log N(v_s; H_s v_[s], R_s)` for one factor of one subject.
pub fn mgp_logdensity(v: &[f64], factors: &BlockFactors, mesh: &MeshGraph) -> f64 {
    let per_block: Vec<f64> = (0..mesh.n_blocks())
        .map(|s| block_logdensity(v, mesh, factors, s))
        .collect();
    per_block.iter().sum()
}

/// Ancestral sampling from given standard normals, consumed block by block
/// in topological order. Pixels outside every block stay zero.
pub fn sample_prior_from_normals(factors: &BlockFactors, mesh: &MeshGraph, z: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; mesh.n_px()];
    let mut cursor = 0;
    for &s in mesh.topo_order() {
        let f = &factors.blocks[s];
        let pix = mesh.block(s);
        let zs = DVector::from_column_slice(&z[cursor..cursor + pix.len()]);
        cursor += pix.len();
        let mut vs = &f.r_chol * zs;
        if f.h.ncols() > 0 {
            let pp = mesh.parent_pixels(s);
            let vp = DVector::from_iterator(pp.len(), pp.iter().map(|&p| v[p]));
            vs += &f.h * vp;
        }
        for (i, &p) in pix.iter().enumerate() {
            v[p] = vs[i];
        }
    }
    v
}

/// Inverse of [`sample_prior_from_normals`]: the standard normals that
/// generate `v`, block by block in topological order.
pub fn whiten(v: &[f64], factors: &BlockFactors, mesh: &MeshGraph) -> Vec<f64> {
    let mut z = Vec::with_capacity(v.len());
    for &s in mesh.topo_order() {
        let f = &factors.blocks[s];
        let mut u = block_residual(v, mesh, f, s);
        f.r_chol.solve_lower_triangular_mut(&mut u);
        z.extend(u.iter());
    }
    z
}

pub fn mgp_sample_prior<R: Rng + ?Sized>(factors: &BlockFactors, mesh: &MeshGraph, rng: &mut R) -> Vec<f64> {
    let n: usize = mesh.blocks().iter().map(Vec::len).sum();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    sample_prior_from_normals(factors, mesh, &z)
}

/// Lower Cholesky factors of the prior full-conditional precision of each
/// block, `R_s^-1 + sum_c H_cs' R_c^-1 H_cs` over children `c`.
fn precision_chol(mesh: &MeshGraph, factors: &BlockFactors, s: usize) -> Result<DMatrix<f64>> {
    let f = &factors.blocks[s];
    let n = mesh.block(s).len();
    let mut linv = DMatrix::<f64>::identity(n, n);
    f.r_chol.solve_lower_triangular_mut(&mut linv);
    let mut prec = linv.transpose() * &linv;
    for &c in mesh.children(s) {
        let fc = &factors.blocks[c];
        let off = mesh
            .parent_offset(c, s)
            .ok_or_else(|| Error::InvalidMesh(format!("{s} not a parent of {c}")))?;
        let mut h_cs = fc.h.columns(off, n).into_owned();
        fc.r_chol.solve_lower_triangular_mut(&mut h_cs);
        prec += h_cs.transpose() * h_cs;
    }
    let prec = (&prec + prec.transpose()) * 0.5;
    prec.cholesky()
        .map(|c| c.l())
        .ok_or(Error::DegenerateBlock { block: s })
}

pub fn conditional_precision_chols(mesh: &MeshGraph, factors: &BlockFactors) -> Result<Vec<DMatrix<f64>>> {
    // the precision depends only on the block's own shape and on the shapes
    // and parent slots of its children
    let mut kinds: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut reps = Vec::new();
    let kind_of: Vec<usize> = (0..mesh.n_blocks())
        .map(|s| {
            let mut key = vec![factors.shape[s]];
            for &c in mesh.children(s) {
                key.push(factors.shape[c]);
                key.push(mesh.parent_offset(c, s).unwrap_or(usize::MAX));
            }
            *kinds.entry(key).or_insert_with(|| {
                reps.push(s);
                reps.len() - 1
            })
        })
        .collect();
    let unique = reps
        .into_par_iter()
        .map(|s| precision_chol(mesh, factors, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(kind_of.iter().map(|&u| unique[u].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(nx: usize, ny: usize) -> GridSpec {
        GridSpec::new(nx, ny, 1.0, (1.0, ny as f64 / nx as f64)).unwrap()
    }

    pub(crate) fn dense_logdensity(v: &[f64], coords: &[[f64; 2]], phi: f64) -> f64 {
        let c = exp_gram(coords, coords, phi);
        let l = c.cholesky().unwrap().l();
        let mut u = DVector::from_column_slice(v);
        l.solve_lower_triangular_mut(&mut u);
        let n = v.len() as f64;
        -0.5 * n * LN_2PI - l.diagonal().iter().map(|d| d.ln()).sum::<f64>() - 0.5 * u.norm_squared()
    }

    #[test]
    fn four_by_four_two_by_two() {
        let m = build_mesh(&grid(4, 4), (2, 2)).unwrap();
        assert_eq!(m.n_blocks(), 4);
        assert!(m.parents(0).is_empty());
        // block (1,1) -> id 3; parents west (0,1)=2 and south (1,0)=1
        let mut p = m.parents(3).to_vec();
        p.sort();
        assert_eq!(p, vec![1, 2]);
        assert_eq!(m.block(0), &[0, 1, 4, 5]);
        assert_eq!(m.topo_order(), &[0, 1, 2, 3]);
    }

    #[test]
    fn big_tile_gives_single_block() {
        let m = build_mesh(&grid(3, 5), (8, 8)).unwrap();
        assert_eq!(m.n_blocks(), 1);
        assert!(m.parents(0).is_empty());
        assert_eq!(m.block(0).len(), 15);
    }

    #[test]
    fn six_by_four_enumeration() {
        let g = grid(6, 4);
        let m = build_mesh(&g, (2, 2)).unwrap();
        assert_eq!(m.n_blocks(), 6);
        // brute force: tile of each pixel, then neighbouring tiles
        let tile_of = |p: usize| {
            let (x, y) = g.pixel_xy(p);
            (x / 2, y / 2)
        };
        for s in 0..6 {
            assert!(m.parents(s).len() <= 2);
            let (tx, ty) = tile_of(m.block(s)[0]);
            for &p in m.block(s) {
                assert_eq!(tile_of(p), (tx, ty));
            }
            for &par in m.parents(s) {
                let (px, py) = tile_of(m.block(par)[0]);
                assert!((px + 1 == tx && py == ty) || (px == tx && py + 1 == ty));
            }
            let expect = usize::from(tx > 0) + usize::from(ty > 0);
            assert_eq!(m.parents(s).len(), expect);
        }
    }

    #[test]
    fn uneven_tiles_at_most_tile_size() {
        let m = build_mesh(&grid(16, 16), (5, 5)).unwrap();
        assert_eq!(m.n_blocks(), 16);
        assert!(m.blocks().iter().all(|b| b.len() == 16));
        assert!(build_mesh(&grid(4, 4), (0, 2)).is_err());
    }

    #[test]
    fn cycle_rejected() {
        let err = MeshGraph::from_parts(2, vec![vec![0], vec![1]], vec![vec![1], vec![0]]);
        assert!(err.is_err());
        let overlap = MeshGraph::from_parts(2, vec![vec![0], vec![0]], vec![vec![], vec![]]);
        assert!(overlap.is_err());
    }

    #[test]
    fn single_block_factor_is_gram() {
        let g = grid(3, 3);
        let m = build_mesh(&g, (3, 3)).unwrap();
        let coords = g.unit_coords();
        let f = compute_factors(&m, &coords, 2.0).unwrap();
        let r = &f.blocks[0].r_chol * f.blocks[0].r_chol.transpose();
        assert_relative_eq!(r, exp_gram(&coords, &coords, 2.0), epsilon = 1e-12);
        assert_eq!(f.blocks[0].h.ncols(), 0);
    }

    #[test]
    fn two_pixel_chain() {
        let d: f64 = 0.3;
        let phi = 1.7;
        let coords = [[0.0, 0.0], [d, 0.0]];
        let m = MeshGraph::from_parts(2, vec![vec![0], vec![1]], vec![vec![], vec![0]]).unwrap();
        let f = compute_factors(&m, &coords, phi).unwrap();
        assert_relative_eq!(f.blocks[1].h[(0, 0)], (-phi * d).exp(), epsilon = 1e-14);
        let r = f.blocks[1].r_chol[(0, 0)].powi(2);
        assert_relative_eq!(r, 1.0 - (-2.0 * phi * d).exp(), epsilon = 1e-14);
    }

    #[test]
    fn single_block_density_at_zero() {
        let g = grid(2, 2);
        let m = build_mesh(&g, (2, 2)).unwrap();
        let f = compute_factors(&m, &g.unit_coords(), 3.0).unwrap();
        let ld = mgp_logdensity(&[0.0; 4], &f, &m);
        let diag: f64 = f.blocks[0].r_chol.diagonal().iter().map(|d| d.ln()).sum();
        assert_relative_eq!(ld, -2.0 * LN_2PI - diag, epsilon = 1e-14);
    }

    #[test]
    fn full_parent_single_pixel_blocks_match_dense() {
        let g = grid(3, 3);
        let coords = g.unit_coords();
        let blocks: Vec<Vec<usize>> = (0..9).map(|p| vec![p]).collect();
        let m = MeshGraph::with_full_parents(9, blocks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let phi = rng.random_range(0.1..10.0);
            let v: Vec<f64> = (0..9).map(|_| rng.sample(StandardNormal)).collect();
            let f = compute_factors(&m, &coords, phi).unwrap();
            assert_relative_eq!(
                mgp_logdensity(&v, &f, &m),
                dense_logdensity(&v, &coords, phi),
                epsilon = 1e-8
            );
        }
    }

    /// Dense precision assembled from H/R: Q = (I - H)' R^-1 (I - H).
    fn induced_precision(mesh: &MeshGraph, f: &BlockFactors) -> DMatrix<f64> {
        let n = mesh.n_px();
        let mut q = DMatrix::<f64>::zeros(n, n);
        for s in 0..mesh.n_blocks() {
            let pix = mesh.block(s);
            let pp = mesh.parent_pixels(s);
            // rows of (I - H) for this block
            let mut b = DMatrix::<f64>::zeros(pix.len(), n);
            for (i, &p) in pix.iter().enumerate() {
                b[(i, p)] = 1.0;
                for (j, &pj) in pp.iter().enumerate() {
                    b[(i, pj)] -= f.blocks[s].h[(i, j)];
                }
            }
            let r = &f.blocks[s].r_chol * f.blocks[s].r_chol.transpose();
            let rinv = r.try_inverse().unwrap();
            q += b.transpose() * rinv * b;
        }
        q
    }

    #[test]
    fn west_south_mesh_matches_induced_precision() {
        let g = grid(4, 3);
        let coords = g.unit_coords();
        let m = build_mesh(&g, (2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let phi = rng.random_range(0.5..5.0);
            let f = compute_factors(&m, &coords, phi).unwrap();
            let q = induced_precision(&m, &f);
            let v = DVector::from_fn(12, |_, _| rng.sample(StandardNormal));
            let lq = q.clone().cholesky().unwrap();
            let logdet_q: f64 = 2.0 * lq.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let expect = -6.0 * LN_2PI + 0.5 * logdet_q - 0.5 * (v.transpose() * &q * &v)[(0, 0)];
            assert_relative_eq!(mgp_logdensity(v.as_slice(), &f, &m), expect, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_normals_give_zero_field() {
        let g = grid(5, 4);
        let m = build_mesh(&g, (2, 2)).unwrap();
        let f = compute_factors(&m, &g.unit_coords(), 1.0).unwrap();
        let v = sample_prior_from_normals(&f, &m, &[0.0; 20]);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn prior_sample_reproducible() {
        let g = grid(6, 6);
        let m = build_mesh(&g, (3, 3)).unwrap();
        let f = compute_factors(&m, &g.unit_coords(), 2.0).unwrap();
        let a = mgp_sample_prior(&f, &m, &mut ChaCha8Rng::seed_from_u64(5));
        let b = mgp_sample_prior(&f, &m, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(mgp_logdensity(&a, &f, &m).is_finite());
    }

    #[test]
    fn whiten_inverts_coloring() {
        let g = grid(7, 5);
        let m = build_mesh(&g, (3, 2)).unwrap();
        let f = compute_factors(&m, &g.unit_coords(), 1.7).unwrap();
        let z: Vec<f64> = (0..35).map(|i| (i as f64 * 0.9).sin()).collect();
        let v = sample_prior_from_normals(&f, &m, &z);
        for (a, b) in whiten(&v, &f, &m).iter().zip(&z) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_block_sample_covariance() {
        let g = grid(3, 2);
        let coords = g.unit_coords();
        let m = build_mesh(&g, (3, 2)).unwrap();
        let phi = 1.5;
        let f = compute_factors(&m, &coords, phi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 20_000;
        let mut cov = DMatrix::<f64>::zeros(6, 6);
        for _ in 0..n {
            let v = DVector::from_vec(mgp_sample_prior(&f, &m, &mut rng));
            cov += &v * v.transpose();
        }
        cov /= n as f64;
        let truth = exp_gram(&coords, &coords, phi);
        assert!((&cov - &truth).norm() / truth.norm() < 0.05);
    }

    #[test]
    fn recompute_is_bit_identical() {
        let g = grid(7, 5);
        let m = build_mesh(&g, (3, 2)).unwrap();
        let c = g.unit_coords();
        let a = compute_factors(&m, &c, 2.2).unwrap();
        let _other = compute_factors(&m, &c, 4.0).unwrap();
        assert_eq!(a, compute_factors(&m, &c, 2.2).unwrap());
    }

    #[test]
    fn factors_spd_across_support() {
        let g = grid(48, 48);
        let m = build_mesh(&g, (5, 5)).unwrap();
        let c = g.unit_coords();
        for phi in [0.1, 0.5, 2.0, 10.0] {
            let f = compute_factors(&m, &c, phi).unwrap();
            assert!(f.blocks.iter().all(|b| b.jitter == 0.0 || b.jitter == JITTER));
        }
    }

    #[test]
    fn restrict_marginalizes_exactly_on_full_parent_dag() {
        // 12 pixels, 4 blocks of 3, full parents => dense GP; dropping pixels
        // must give the dense marginal of the remaining ones.
        let g = grid(4, 3);
        let coords = g.unit_coords();
        let blocks: Vec<Vec<usize>> = (0..4).map(|b| (3 * b..3 * b + 3).collect()).collect();
        let m = MeshGraph::with_full_parents(12, blocks).unwrap();
        let mut observed = vec![true; 12];
        for p in [1, 3, 4, 5, 10] {
            observed[p] = false;
        }
        let r = m.restrict(&observed).unwrap();
        assert_eq!(r.n_blocks(), 3);
        let kept: Vec<usize> = (0..12).filter(|&p| observed[p]).collect();
        let kept_coords: Vec<[f64; 2]> = kept.iter().map(|&p| coords[p]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let phi = rng.random_range(0.2..6.0);
            let f = compute_factors(&r, &coords, phi).unwrap();
            let v: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
            let vk: Vec<f64> = kept.iter().map(|&p| v[p]).collect();
            assert_relative_eq!(
                mgp_logdensity(&v, &f, &r),
                dense_logdensity(&vk, &kept_coords, phi),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn restrict_reparents_children_of_removed_blocks() {
        let g = grid(6, 2);
        let m = build_mesh(&g, (2, 2)).unwrap();
        // chain of three tiles; wipe out the middle one
        let mut observed = vec![true; 12];
        for &p in m.block(1) {
            observed[p] = false;
        }
        let r = m.restrict(&observed).unwrap();
        assert_eq!(r.n_blocks(), 2);
        assert_eq!(r.parents(1), &[0]);
        assert!(m.restrict(&[false; 12]).is_err());
    }

    #[test]
    fn conditional_precision_matches_dense_block() {
        let g = grid(4, 4);
        let coords = g.unit_coords();
        let m = build_mesh(&g, (2, 2)).unwrap();
        let f = compute_factors(&m, &coords, 1.3).unwrap();
        let q = induced_precision(&m, &f);
        let chols = conditional_precision_chols(&m, &f).unwrap();
        for s in 0..m.n_blocks() {
            let pix = m.block(s);
            let sub = DMatrix::from_fn(pix.len(), pix.len(), |i, j| q[(pix[i], pix[j])]);
            let got = &chols[s] * chols[s].transpose();
            assert_relative_eq!(got, sub, epsilon = 1e-8, max_relative = 1e-8);
        }
    }
}
