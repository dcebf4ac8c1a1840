//! Gauss-Newton normal equations `A x = b` over the 6G grid unknowns.
//!
//! Alignment residuals couple the four nodes of a grid cell, so every node
//! talks to its 3x3 neighbourhood. Each node owns the 6x6 blocks towards
//! itself and its forward neighbours (right, down-left, down, down-right); the
//! backward half follows by symmetry. Smoothness is an exact quadratic and is
//! applied on the fly from one coefficient per node and flow.

use rayon::prelude::*;

use super::pcg::LinearOperator;
use crate::domain::{Flow, WarpGrid};
use crate::energy::{epipolar_linearization, linearize_pixel, unknown_index, LevelProblem, NODE_DOF};
use crate::error::{Error, Result};

pub type Block = [f64; 36];

/// Block slots owned by a node.
pub const SELF: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN_LEFT: usize = 2;
pub const DOWN: usize = 3;
pub const DOWN_RIGHT: usize = 4;
const SLOTS: usize = 5;

#[derive(Clone, Debug)]
pub struct NormalSystem {
    gw: usize,
    gh: usize,
    active: [bool; 3],
    blocks: Vec<[Block; SLOTS]>,
    /// Smoothness coefficient per node and flow (0 for pinned flows).
    smooth: Vec<[f64; 3]>,
    rhs: Vec<f64>,
    /// Inverse 2x2 diagonal block per node and flow, row-major.
    precond: Vec<[[f64; 4]; 3]>,
    /// Energy at the linearization point.
    energy: f64,
}

/// Mutable view of the two node rows touched by one row of grid cells.
struct RowPair<'a> {
    blocks: &'a mut [[Block; SLOTS]],
    rhs: &'a mut [[f64; 6]],
}

impl NormalSystem {
    /// Linearizes `problem` at `delta`. `lm_boost` scales the diagonal by
    /// `1 + lm_boost` (0 disables it).
    pub fn build(problem: &LevelProblem<'_>, delta: &WarpGrid, lm_boost: f64) -> Result<Self> {
        let acc = problem.accumulated(delta);
        let gw = acc.grid_w();
        let gh = acc.grid_h();
        let g = acc.node_count();
        assert!(gw >= 2 && gh >= 2, "warp grid needs at least 2x2 nodes");
        let energy = problem.residuals_with(&acc, delta).energy();

        let mut blocks = vec![[[0.0; 36]; SLOTS]; g];
        let mut rhs_nodes = vec![[0.0; 6]; g];
        {
            let mut rows: Vec<RowPair<'_>> = blocks
                .chunks_mut(gw)
                .zip(rhs_nodes.chunks_mut(gw))
                .map(|(blocks, rhs)| RowPair { blocks, rhs })
                .collect();
            // even cell rows, then odd ones: each task writes node rows cb, cb+1
            for phase in 0..2 {
                rows[phase..]
                    .par_chunks_mut(2)
                    .enumerate()
                    .map(|(i, pair)| {
                        let cb = 2 * i + phase;
                        if cb + 1 >= gh {
                            return Ok(());
                        }
                        assemble_cell_row(problem, &acc, cb, pair)
                    })
                    .collect::<Result<Vec<()>>>()?;
            }
        }

        let mut rhs: Vec<f64> = rhs_nodes.into_iter().flatten().collect();
        let params = problem.params;
        let mut smooth = vec![[0.0; 3]; g];
        for (k, c) in smooth.iter_mut().enumerate() {
            for flow in Flow::ALL {
                if problem.active[flow.index()] {
                    c[flow.index()] = params.w_smooth
                        * params.w_reg
                        * problem.weights.feature[k]
                        * params.smooth_weight(flow);
                }
            }
        }
        // smoothness gradient on the accumulated flow
        let mut sys = NormalSystem {
            gw,
            gh,
            active: problem.active,
            blocks,
            smooth,
            rhs: Vec::new(),
            precond: Vec::new(),
            energy,
        };
        let acc_flat = flatten(&acc);
        let mut smooth_grad = vec![0.0; 6 * g];
        sys.apply_smooth(&acc_flat, &mut smooth_grad);
        rhs.iter_mut().zip(&smooth_grad).for_each(|(r, s)| *r -= s);

        if let Some(f) = problem.fundamental {
            let scale = (params.w_epi * params.w_reg).sqrt();
            for k in 0..g {
                for t in 0..2 {
                    let (e, d) = epipolar_linearization(&acc, k, t, f);
                    let mut a = [0.0; 6];
                    for q in 0..6 {
                        if problem.active[q / 2] {
                            a[q] = scale * d[q];
                        }
                    }
                    if let Some(q) = a.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteJacobian {
                            residual: 2 * acc.width() * acc.height() + 6 * g + 2 * k + t,
                            unknown: NODE_DOF * k + q,
                        });
                    }
                    let blk = &mut sys.blocks[k][SELF];
                    for i in 0..6 {
                        for j in 0..6 {
                            blk[6 * i + j] += a[i] * a[j];
                        }
                        rhs[NODE_DOF * k + i] -= a[i] * scale * e;
                    }
                }
            }
        }
        for flow in Flow::ALL {
            if !problem.active[flow.index()] {
                continue;
            }
            let kappa = params.w_mag * params.w_reg * params.mag_weight(flow);
            for (k, v) in delta.field(flow).iter().enumerate() {
                for axis in 0..2 {
                    let q = 2 * flow.index() + axis;
                    sys.blocks[k][SELF][7 * q] += kappa;
                    rhs[unknown_index(k, flow, axis)] -= kappa * v[axis];
                }
            }
        }
        if lm_boost > 0.0 {
            for k in 0..g {
                let sd = sys.smooth_diagonal(k);
                for q in 0..6 {
                    let diag = sys.blocks[k][SELF][7 * q] + sd[q / 2];
                    sys.blocks[k][SELF][7 * q] += lm_boost * diag;
                }
            }
        }
        for (k, r) in rhs.chunks_mut(6).enumerate() {
            for q in 0..6 {
                if !problem.active[q / 2] {
                    r[q] = 0.0;
                }
            }
            debug_assert!(r.iter().all(|v| v.is_finite()), "rhs at node {k}");
        }
        sys.rhs = rhs;
        sys.precond = (0..g).map(|k| sys.precond_node(k)).collect();
        Ok(sys)
    }

    pub fn grid_w(&self) -> usize {
        self.gw
    }

    pub fn grid_h(&self) -> usize {
        self.gh
    }

    pub fn nodes(&self) -> usize {
        self.gw * self.gh
    }

    pub fn active(&self) -> [bool; 3] {
        self.active
    }

    /// `-J^T R` at the linearization point.
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn block(&self, node: usize, slot: usize) -> &Block {
        &self.blocks[node][slot]
    }

    /// Sum of smoothness coefficients on the diagonal of node `k`, per flow.
    fn smooth_diagonal(&self, k: usize) -> [f64; 3] {
        let (a, b) = (k % self.gw, k / self.gw);
        let mut out = [0.0; 3];
        for f in 0..3 {
            let mut s = 0.0;
            let forward = (a + 1 < self.gw) as usize + (b + 1 < self.gh) as usize;
            s += forward as f64 * self.smooth[k][f];
            if a > 0 {
                s += self.smooth[k - 1][f];
            }
            if b > 0 {
                s += self.smooth[k - self.gw][f];
            }
            out[f] = s;
        }
        out
    }

    fn precond_node(&self, k: usize) -> [[f64; 4]; 3] {
        let blk = &self.blocks[k][SELF];
        let sd = self.smooth_diagonal(k);
        let mut out = [[0.0; 4]; 3];
        for f in 0..3 {
            if !self.active[f] {
                continue;
            }
            let q = 2 * f;
            let a = blk[6 * q + q] + sd[f];
            let b = blk[6 * q + q + 1];
            let c = blk[6 * (q + 1) + q];
            let d = blk[6 * (q + 1) + q + 1] + sd[f];
            let det = a * d - b * c;
            out[f] = if det > 1e-12 * (a * d).abs().max(f64::MIN_POSITIVE) && a > 0.0 && d > 0.0 {
                [d / det, -b / det, -c / det, a / det]
            } else if a > 0.0 && d > 0.0 {
                [1.0 / a, 0.0, 0.0, 1.0 / d]
            } else {
                [1.0, 0.0, 0.0, 1.0]
            };
        }
        out
    }

    /// Adds the smoothness Hessian times `x` to `y`.
    fn apply_smooth(&self, x: &[f64], y: &mut [f64]) {
        let gw = self.gw;
        y.par_chunks_mut(6 * gw).enumerate().for_each(|(b, yrow)| {
            for a in 0..gw {
                let k = b * gw + a;
                let yk = &mut yrow[6 * a..6 * a + 6];
                self.smooth_node(k, x, yk);
            }
        });
    }

    #[inline]
    fn smooth_node(&self, k: usize, x: &[f64], yk: &mut [f64]) {
        let (a, b) = (k % self.gw, k / self.gw);
        let gw = self.gw;
        let mut edge = |c: &[f64; 3], j: usize| {
            for q in 0..6 {
                yk[q] += c[q / 2] * (x[6 * k + q] - x[6 * j + q]);
            }
        };
        if a + 1 < gw {
            edge(&self.smooth[k], k + 1);
        }
        if b + 1 < self.gh {
            edge(&self.smooth[k], k + gw);
        }
        if a > 0 {
            edge(&self.smooth[k - 1], k - 1);
        }
        if b > 0 {
            edge(&self.smooth[k - gw], k - gw);
        }
    }

    /// Row `k` of `A x`, reading `x` through `get` (`None` means zero).
    #[inline]
    pub(crate) fn node_product<'x>(&self, k: usize, get: impl Fn(usize) -> Option<&'x [f64]>, out: &mut [f64]) {
        let (a, b) = (k % self.gw, k / self.gw);
        let (gw, gh) = (self.gw, self.gh);
        out[..6].fill(0.0);
        let mut mul = |blk: &Block, xj: &[f64], transpose: bool| {
            for i in 0..6 {
                let mut s = 0.0;
                for j in 0..6 {
                    let v = if transpose { blk[6 * j + i] } else { blk[6 * i + j] };
                    s += v * xj[j];
                }
                out[i] += s;
            }
        };
        let own = &self.blocks[k];
        if let Some(xk) = get(k) {
            mul(&own[SELF], xk, false);
        }
        let forward = [
            (RIGHT, a + 1 < gw, 1isize),
            (DOWN_LEFT, a > 0 && b + 1 < gh, gw as isize - 1),
            (DOWN, b + 1 < gh, gw as isize),
            (DOWN_RIGHT, a + 1 < gw && b + 1 < gh, gw as isize + 1),
        ];
        for (slot, ok, off) in forward {
            if ok {
                if let Some(xj) = get((k as isize + off) as usize) {
                    mul(&own[slot], xj, false);
                }
            }
        }
        let backward = [
            (RIGHT, a > 0, 1isize),
            (DOWN_LEFT, a + 1 < gw && b > 0, gw as isize - 1),
            (DOWN, b > 0, gw as isize),
            (DOWN_RIGHT, a > 0 && b > 0, gw as isize + 1),
        ];
        for (slot, ok, off) in backward {
            if ok {
                let j = (k as isize - off) as usize;
                if let Some(xj) = get(j) {
                    mul(&self.blocks[j][slot], xj, true);
                }
            }
        }
        // smoothness, with absent neighbours read as zero
        let zero = [0.0; 6];
        let xk = get(k).unwrap_or(&zero);
        let mut edge = |c: &[f64; 3], j: usize| {
            let xj = get(j).unwrap_or(&zero);
            for q in 0..6 {
                out[q] += c[q / 2] * (xk[q] - xj[q]);
            }
        };
        if a + 1 < gw {
            edge(&self.smooth[k], k + 1);
        }
        if b + 1 < gh {
            edge(&self.smooth[k], k + gw);
        }
        if a > 0 {
            edge(&self.smooth[k - 1], k - 1);
        }
        if b > 0 {
            edge(&self.smooth[k - gw], k - gw);
        }
    }

    #[inline]
    pub(crate) fn precondition_node(&self, k: usize, r: &[f64], z: &mut [f64]) {
        for f in 0..3 {
            let m = &self.precond[k][f];
            let (r0, r1) = (r[2 * f], r[2 * f + 1]);
            z[2 * f] = m[0] * r0 + m[1] * r1;
            z[2 * f + 1] = m[2] * r0 + m[3] * r1;
        }
    }

    /// Dense `A`, for tests on small grids.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = 6 * self.nodes();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            m.set_column(j, &nalgebra::DVector::from_column_slice(&col));
            e[j] = 0.0;
        }
        m
    }

    /// Value of the linearized energy `|R + J x|^2` for a step `x`.
    pub fn linearized_energy(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.apply(x, &mut ax);
        self.energy + super::pcg::dot(x, &ax) - 2.0 * super::pcg::dot(&self.rhs, x)
    }
}

impl LinearOperator for NormalSystem {
    fn dim(&self) -> usize {
        6 * self.nodes()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let gw = self.gw;
        y.par_chunks_mut(6 * gw).enumerate().for_each(|(b, yrow)| {
            for a in 0..gw {
                let k = b * gw + a;
                self.node_product(k, |j| Some(&x[6 * j..6 * j + 6]), &mut yrow[6 * a..6 * a + 6]);
            }
        });
    }

    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        z.par_chunks_mut(6)
            .zip(r.par_chunks(6))
            .enumerate()
            .for_each(|(k, (zk, rk))| self.precondition_node(k, rk, zk));
    }
}

/// Flat unknown vector of a grid, `6 * node + 2 * flow + axis`.
pub fn flatten(grid: &WarpGrid) -> Vec<f64> {
    let mut out = vec![0.0; 6 * grid.node_count()];
    for flow in Flow::ALL {
        for (k, v) in grid.field(flow).iter().enumerate() {
            out[unknown_index(k, flow, 0)] = v.x;
            out[unknown_index(k, flow, 1)] = v.y;
        }
    }
    out
}

/// Adds a flat unknown vector onto a grid.
pub fn add_flat(grid: &mut WarpGrid, x: &[f64]) {
    for flow in Flow::ALL {
        for (k, v) in grid.field_mut(flow).iter_mut().enumerate() {
            v.x += x[unknown_index(k, flow, 0)];
            v.y += x[unknown_index(k, flow, 1)];
        }
    }
}

fn assemble_cell_row(
    problem: &LevelProblem<'_>,
    acc: &WarpGrid,
    cb: usize,
    pair: &mut [RowPair<'_>],
) -> Result<()> {
    let (w, h) = (acc.width(), acc.height());
    let (gw, gh) = (acc.grid_w(), acc.grid_h());
    let step = acc.step();
    let n = w * h;
    let y0 = cb * step;
    let y1 = if cb + 2 == gh { h } else { ((cb + 1) * step).min(h) };
    for y in y0..y1 {
        for x in 0..w {
            let p = y * w + x;
            let mask = problem.weights.mask(p);
            if mask == 0 {
                continue;
            }
            let samples = problem.pixel_samples(acc, x, y);
            let mut lin = linearize_pixel(&samples, mask, problem.params);
            for t in 0..2 {
                for q in 0..6 {
                    if !problem.active[q / 2] {
                        lin.j[t][q] = 0.0;
                    }
                }
                if let Some(q) = lin.j[t].iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteJacobian {
                        residual: t * n + p,
                        unknown: q,
                    });
                }
            }
            let mut outer = [0.0; 36];
            let mut grad = [0.0; 6];
            for t in 0..2 {
                let j = &lin.j[t];
                for a in 0..6 {
                    grad[a] += j[a] * lin.r[t];
                    for b in 0..6 {
                        outer[6 * a + b] += j[a] * j[b];
                    }
                }
            }
            let weights = acc.weights_clamped(x as f64, y as f64);
            for i in 0..4 {
                let (ki, ai) = weights[i];
                if ai == 0.0 {
                    continue;
                }
                let (ri, ci) = (ki / gw - cb, ki % gw);
                for q in 0..6 {
                    pair[ri].rhs[ci][q] -= ai * grad[q];
                }
                for &(kj, aj) in &weights[i..] {
                    if aj == 0.0 {
                        continue;
                    }
                    let s = ai * aj;
                    let (owner, slot) = if kj == ki {
                        (ki, SELF)
                    } else {
                        pair_slot(ki.min(kj), ki.max(kj), gw)
                    };
                    let (ro, co) = (owner / gw - cb, owner % gw);
                    let blk = &mut pair[ro].blocks[co][slot];
                    for e in 0..36 {
                        blk[e] += s * outer[e];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Owner node and slot of the block coupling nodes `lo < hi`.
fn pair_slot(lo: usize, hi: usize, gw: usize) -> (usize, usize) {
    let (la, lb) = (lo % gw, lo / gw);
    let (ha, hb) = (hi % gw, hi / gw);
    let slot = if hb == lb {
        debug_assert_eq!(ha, la + 1);
        RIGHT
    } else {
        debug_assert_eq!(hb, lb + 1);
        match ha as isize - la as isize {
            -1 => DOWN_LEFT,
            0 => DOWN,
            1 => DOWN_RIGHT,
            d => unreachable!("nodes {lo} and {hi} are {d} columns apart"),
        }
    };
    (lo, slot)
}
