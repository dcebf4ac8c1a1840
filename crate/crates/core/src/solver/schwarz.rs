//! Alternating Schwarz over square subdomains of the warp grid.
//!
//! Each subdomain solves for a correction on its interior nodes against the
//! current global residual, with every other node (including its boundary
//! ring) frozen. Subdomains are swept in four colors by tile parity; tiles of
//! one color never share a coupling, so they are solved in parallel and
//! published together before the next color starts.

use rayon::prelude::*;

use super::normal::NormalSystem;
use super::pcg::{dot, pcg, LinearOperator};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subdomain {
    /// Interior node rectangle `[a0, a1) x [b0, b1)`.
    pub a0: usize,
    pub a1: usize,
    pub b0: usize,
    pub b1: usize,
    /// Interior plus boundary ring, clipped to the grid.
    pub ring: [usize; 4],
    /// Sweep color in `0..4`.
    pub color: usize,
}

impl Subdomain {
    pub fn width(&self) -> usize {
        self.a1 - self.a0
    }

    pub fn height(&self) -> usize {
        self.b1 - self.b0
    }

    pub fn len(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        a >= self.a0 && a < self.a1 && b >= self.b0 && b < self.b1
    }

    /// Whether node `(a, b)` is in the boundary ring (not interior).
    pub fn is_boundary(&self, a: usize, b: usize) -> bool {
        let [ra0, ra1, rb0, rb1] = self.ring;
        a >= ra0 && a < ra1 && b >= rb0 && b < rb1 && !self.contains(a, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub grid_w: usize,
    pub grid_h: usize,
    pub tiles: Vec<Subdomain>,
}

impl Tiling {
    /// Tiles of `tile_px` pixels (plus a `ring_px` boundary) on a grid with
    /// node spacing `step`.
    pub fn new(grid_w: usize, grid_h: usize, step: usize, tile_px: usize, ring_px: usize) -> Self {
        let t = tile_px.div_ceil(step).max(1);
        let ring = ring_px.div_ceil(step);
        let mut tiles = Vec::new();
        for (ty, b0) in (0..grid_h).step_by(t).enumerate() {
            for (tx, a0) in (0..grid_w).step_by(t).enumerate() {
                let a1 = (a0 + t).min(grid_w);
                let b1 = (b0 + t).min(grid_h);
                tiles.push(Subdomain {
                    a0,
                    a1,
                    b0,
                    b1,
                    ring: [
                        a0.saturating_sub(ring),
                        (a1 + ring).min(grid_w),
                        b0.saturating_sub(ring),
                        (b1 + ring).min(grid_h),
                    ],
                    color: (tx % 2) + 2 * (ty % 2),
                });
            }
        }
        Tiling {
            grid_w,
            grid_h,
            tiles,
        }
    }

    /// One subdomain covering the whole grid, i.e. a global solve.
    pub fn single(grid_w: usize, grid_h: usize) -> Self {
        Tiling {
            grid_w,
            grid_h,
            tiles: vec![Subdomain {
                a0: 0,
                a1: grid_w,
                b0: 0,
                b1: grid_h,
                ring: [0, grid_w, 0, grid_h],
                color: 0,
            }],
        }
    }
}

/// A subdomain's restriction of the global system.
struct LocalOperator<'a> {
    sys: &'a NormalSystem,
    tile: &'a Subdomain,
}

impl LocalOperator<'_> {
    #[inline]
    fn local_index(&self, k: usize) -> Option<usize> {
        let gw = self.sys.grid_w();
        let (a, b) = (k % gw, k / gw);
        self.tile
            .contains(a, b)
            .then(|| (b - self.tile.b0) * self.tile.width() + (a - self.tile.a0))
    }

    #[inline]
    fn global_index(&self, i: usize) -> usize {
        let w = self.tile.width();
        (self.tile.b0 + i / w) * self.sys.grid_w() + self.tile.a0 + i % w
    }
}

impl LinearOperator for LocalOperator<'_> {
    fn dim(&self) -> usize {
        6 * self.tile.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.tile.len() {
            let k = self.global_index(i);
            self.sys.node_product(
                k,
                |j| self.local_index(j).map(|l| &x[6 * l..6 * l + 6]),
                &mut y[6 * i..6 * i + 6],
            );
        }
    }

    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        for i in 0..self.tile.len() {
            let k = self.global_index(i);
            self.sys
                .precondition_node(k, &r[6 * i..6 * i + 6], &mut z[6 * i..6 * i + 6]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchwarzResult {
    /// Gauss-Newton step over all 6G unknowns.
    pub step: Vec<f64>,
    /// Linearized energy `|R + J x|^2` after every PCG iteration, in sweep,
    /// color and iteration order.
    pub linear_energy: Vec<f64>,
}

/// Runs `patch_iters` sweeps of `pcg_iters` PCG iterations per subdomain.
pub fn schwarz_solve(
    sys: &NormalSystem,
    tiling: &Tiling,
    patch_iters: usize,
    pcg_iters: usize,
) -> Result<SchwarzResult> {
    let n = sys.dim();
    let b = sys.rhs();
    let mut x = vec![0.0; n];
    let mut residual = b.to_vec();
    let mut ax = vec![0.0; n];
    let mut model = 0.0;
    let mut trace = Vec::with_capacity(patch_iters * 4 * pcg_iters);
    let colors: Vec<usize> = {
        let mut c: Vec<usize> = tiling.tiles.iter().map(|t| t.color).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    for _ in 0..patch_iters {
        for &color in &colors {
            let tiles: Vec<&Subdomain> = tiling.tiles.iter().filter(|t| t.color == color).collect();
            let solved: Vec<(Vec<f64>, Vec<f64>)> = tiles
                .par_iter()
                .map(|tile| {
                    let op = LocalOperator { sys, tile };
                    let mut local_b = vec![0.0; op.dim()];
                    for i in 0..tile.len() {
                        let k = op.global_index(i);
                        local_b[6 * i..6 * i + 6].copy_from_slice(&residual[6 * k..6 * k + 6]);
                    }
                    let res = pcg(&op, &local_b, pcg_iters)?;
                    Ok((res.x, res.model))
                })
                .collect::<Result<_>>()?;
            for j in 0..pcg_iters {
                let mut m = model;
                for (_, tile_model) in &solved {
                    if let Some(v) = tile_model.get(j).or(tile_model.last()) {
                        m += v;
                    }
                }
                trace.push(sys.energy() + 2.0 * m);
            }
            for (tile, (local, tile_model)) in tiles.iter().zip(&solved) {
                model += tile_model.last().copied().unwrap_or(0.0);
                let op = LocalOperator { sys, tile };
                for i in 0..tile.len() {
                    let k = op.global_index(i);
                    for q in 0..6 {
                        x[6 * k + q] += local[6 * i + q];
                    }
                }
            }
            sys.apply(&x, &mut ax);
            residual.iter_mut().zip(b.iter().zip(&ax)).for_each(|(r, (bi, ai))| *r = bi - ai);
        }
    }
    debug_assert!({
        let q = 0.5 * dot(&x, &ax) - dot(b, &x);
        (q - model).abs() <= 1e-6 * (1.0 + q.abs())
    });
    Ok(SchwarzResult {
        step: x,
        linear_energy: trace,
    })
}
