//! The scene flow energy as a stacked residual vector.
//!
//! Residuals are ordered photo (one per pixel), gradient (one per pixel),
//! smoothness (six per node), epipolar (two per node) and magnitude (six per
//! node), so `M = 2N + 14G`. Robust terms are square-rooted, which makes
//! `E(S) = |R(S)|^2` an ordinary least-squares objective.

mod params;

pub use params::{EnergyParams, Preset, PARAM_KEYS};
pub(crate) use params::key_values;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::domain::{
    checks_from_samples, sample_views, warp_position, CheckSet, Flow, PixelFlow, Vec2, View, WarpGrid,
    CHECKS, VIEWS,
};
use crate::image::{structure_weight, Image, SplineImage, SplineSample};

/// Bit mask with one bit per consistency check.
pub type CheckMask = u8;
pub const ALL_CHECKS: CheckMask = 0b11_1111;

/// Number of unknowns per warp grid node.
pub const NODE_DOF: usize = 6;

#[inline]
pub fn unknown_index(node: usize, flow: Flow, axis: usize) -> usize {
    NODE_DOF * node + 2 * flow.index() + axis
}

#[inline]
pub fn pseudo_huber(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt()
}

#[inline]
pub fn pseudo_huber_derivative(x: f64, eps: f64) -> f64 {
    x / pseudo_huber(x, eps)
}

/// Visibility, outlier and feature weights, frozen during one linearization.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeights {
    /// Per halfway pixel, bit `k` set iff check `k` is visible.
    pub visibility: Vec<CheckMask>,
    /// Per halfway pixel, `true` iff the pixel passes the outlier test.
    pub inlier: Vec<bool>,
    /// Per warp grid node, in `[1, 100]`.
    pub feature: Vec<f64>,
}

impl PixelWeights {
    pub fn uniform(pixels: usize, nodes: usize) -> Self {
        PixelWeights {
            visibility: vec![ALL_CHECKS; pixels],
            inlier: vec![true; pixels],
            feature: vec![1.0; nodes],
        }
    }

    #[inline]
    pub fn mask(&self, pixel: usize) -> CheckMask {
        if self.inlier[pixel] {
            self.visibility[pixel]
        } else {
            0
        }
    }
}

/// `sqrt(w_photo * sum_k V_k W Phi(d_k))`
pub fn photo_residual(checks: &CheckSet, mask: CheckMask, params: &EnergyParams) -> f64 {
    let sum: f64 = (0..6)
        .filter(|k| mask & (1 << k) != 0)
        .map(|k| pseudo_huber(checks.d[k], params.eps_huber))
        .sum();
    (params.w_photo * sum).sqrt()
}

/// `sqrt(w_grad * sum_k V_k W Phi(|grad d_k|^2))`
pub fn grad_residual(checks: &CheckSet, mask: CheckMask, params: &EnergyParams) -> f64 {
    let sum: f64 = (0..6)
        .filter(|k| mask & (1 << k) != 0)
        .map(|k| {
            let g = checks.grad[k];
            pseudo_huber(g[0] * g[0] + g[1] * g[1], params.eps_huber)
        })
        .sum();
    (params.w_grad * sum).sqrt()
}

/// Photo and gradient residuals of one pixel with their derivatives w.r.t.
/// the pixel's six flow components `[s.x, s.y, m.x, m.y, d.x, d.y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelLinearization {
    pub r: [f64; 2],
    pub j: [[f64; 6]; 2],
}

/// Linearizes the two alignment residuals of a pixel from its view samples.
pub fn linearize_pixel(
    samples: &[SplineSample; 4],
    mask: CheckMask,
    params: &EnergyParams,
) -> PixelLinearization {
    let checks = checks_from_samples(samples);
    let eps = params.eps_huber;
    let mut out = PixelLinearization::default();
    if mask == 0 {
        return out;
    }
    let mut photo_sum = 0.0;
    let mut grad_sum = 0.0;
    let mut dphoto = [0.0; 6];
    let mut dgrad = [0.0; 6];
    for (k, (a, b)) in CHECKS.iter().enumerate() {
        if mask & (1 << k) == 0 {
            continue;
        }
        let sa = &samples[a.index()];
        let sb = &samples[b.index()];
        let d = checks.d[k];
        let g = checks.grad[k];
        let q = g[0] * g[0] + g[1] * g[1];
        photo_sum += pseudo_huber(d, eps);
        grad_sum += pseudo_huber(q, eps);
        let pd = pseudo_huber_derivative(d, eps);
        let pq = pseudo_huber_derivative(q, eps);
        for flow in Flow::ALL {
            let ca = a.flow_sign(flow);
            let cb = b.flow_sign(flow);
            for axis in 0..2 {
                let idx = 2 * flow.index() + axis;
                let dd = sa.grad[axis] * ca - sb.grad[axis] * cb;
                // column `axis` of the Hessians
                let (ha, hb) = if axis == 0 {
                    ([sa.hess[0], sa.hess[1]], [sb.hess[0], sb.hess[1]])
                } else {
                    ([sa.hess[1], sa.hess[2]], [sb.hess[1], sb.hess[2]])
                };
                let dg0 = ha[0] * ca - hb[0] * cb;
                let dg1 = ha[1] * ca - hb[1] * cb;
                let dq = 2.0 * (g[0] * dg0 + g[1] * dg1);
                dphoto[idx] += pd * dd;
                dgrad[idx] += pq * dq;
            }
        }
    }
    out.r[0] = (params.w_photo * photo_sum).sqrt();
    out.r[1] = (params.w_grad * grad_sum).sqrt();
    for (t, (dsum, w)) in [(dphoto, params.w_photo), (dgrad, params.w_grad)].into_iter().enumerate() {
        if out.r[t] > 0.0 {
            let scale = w / (2.0 * out.r[t]);
            for q in 0..6 {
                out.j[t][q] = scale * dsum[q];
            }
        }
    }
    out
}

/// Stacked residuals `R(S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVector {
    pub values: Vec<f64>,
    pub pixels: usize,
    pub nodes: usize,
}

impl ResidualVector {
    pub fn expected_len(pixels: usize, nodes: usize) -> usize {
        2 * pixels + 14 * nodes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn photo(&self) -> &[f64] {
        &self.values[..self.pixels]
    }

    pub fn grad(&self) -> &[f64] {
        &self.values[self.pixels..2 * self.pixels]
    }

    pub fn smooth(&self) -> &[f64] {
        let o = 2 * self.pixels;
        &self.values[o..o + 6 * self.nodes]
    }

    pub fn epi(&self) -> &[f64] {
        let o = 2 * self.pixels + 6 * self.nodes;
        &self.values[o..o + 2 * self.nodes]
    }

    pub fn mag(&self) -> &[f64] {
        let o = 2 * self.pixels + 8 * self.nodes;
        &self.values[o..o + 6 * self.nodes]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|r| r * r).sum()
    }

    pub fn terms(&self) -> EnergyTerms {
        let sq = |s: &[f64]| s.iter().map(|r| r * r).sum::<f64>();
        EnergyTerms {
            photo: sq(self.photo()),
            grad: sq(self.grad()),
            smooth: sq(self.smooth()),
            epi: sq(self.epi()),
            mag: sq(self.mag()),
        }
    }
}

/// Weighted energy of each term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyTerms {
    pub photo: f64,
    pub grad: f64,
    pub smooth: f64,
    pub epi: f64,
    pub mag: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.photo + self.grad + self.smooth + self.epi + self.mag
    }

    /// `E_photo + E_grad` without the term weights.
    pub fn data_unweighted(&self, params: &EnergyParams) -> f64 {
        let un = |e: f64, w: f64| if w > 0.0 { e / w } else { 0.0 };
        un(self.photo, params.w_photo) + un(self.grad, params.w_grad)
    }
}

/// Smoothness residuals on accumulated node flows, six per node.
pub fn smooth_residuals(grid: &WarpGrid, feature: &[f64], params: &EnergyParams) -> Vec<f64> {
    let (gw, gh) = (grid.grid_w(), grid.grid_h());
    let mut out = vec![0.0; 6 * grid.node_count()];
    for b in 0..gh {
        for a in 0..gw {
            let i = b * gw + a;
            for flow in Flow::ALL {
                let c = params.w_smooth * params.w_reg * feature[i] * params.smooth_weight(flow);
                let field = grid.field(flow);
                for axis in 0..2 {
                    let mut sum = 0.0;
                    for j in forward_neighbours(a, b, gw, gh) {
                        let diff = field[i][axis] - field[j][axis];
                        sum += diff * diff;
                    }
                    out[unknown_index(i, flow, axis)] = (c * sum).sqrt();
                }
            }
        }
    }
    out
}

/// Right and down neighbours of node `(a, b)`, where present.
#[inline]
pub fn forward_neighbours(a: usize, b: usize, gw: usize, gh: usize) -> impl Iterator<Item = usize> {
    let i = b * gw + a;
    let right = (a + 1 < gw).then_some(i + 1);
    let down = (b + 1 < gh).then_some(i + gw);
    right.into_iter().chain(down)
}

/// `l^T F r` of node `k` at time `t` with its derivative w.r.t. the node's six
/// flow components.
pub fn epipolar_linearization(grid: &WarpGrid, k: usize, t: usize, f: &Matrix3<f64>) -> (f64, [f64; 6]) {
    let x = grid.node_position(k);
    let flow = grid.node(k);
    let lv = View::new(0, t);
    let rv = View::new(1, t);
    let lp = warp_position(x, &flow, 0, t);
    let rp = warp_position(x, &flow, 1, t);
    let l = nalgebra::Vector3::new(lp.x, lp.y, 1.0);
    let r = nalgebra::Vector3::new(rp.x, rp.y, 1.0);
    let fr = f * r;
    let ftl = f.transpose() * l;
    let value = l.dot(&fr);
    let mut d = [0.0; 6];
    for fl in Flow::ALL {
        for axis in 0..2 {
            d[2 * fl.index() + axis] = lv.flow_sign(fl) * fr[axis] + rv.flow_sign(fl) * ftl[axis];
        }
    }
    (value, d)
}

/// Epipolar residuals, two per node; all zero without a fundamental matrix.
pub fn epi_residuals(grid: &WarpGrid, f: Option<&Matrix3<f64>>, params: &EnergyParams) -> Vec<f64> {
    let mut out = vec![0.0; 2 * grid.node_count()];
    let Some(f) = f else { return out };
    let scale = (params.w_epi * params.w_reg).sqrt();
    for k in 0..grid.node_count() {
        for t in 0..2 {
            out[2 * k + t] = scale * epipolar_linearization(grid, k, t, f).0;
        }
    }
    out
}

/// Magnitude residuals on the level's delta flows, six per node.
pub fn mag_residuals(delta: &WarpGrid, params: &EnergyParams) -> Vec<f64> {
    let mut out = vec![0.0; 6 * delta.node_count()];
    for flow in Flow::ALL {
        let scale = (params.w_mag * params.w_reg * params.mag_weight(flow)).sqrt();
        for (k, v) in delta.field(flow).iter().enumerate() {
            out[unknown_index(k, flow, 0)] = scale * v.x;
            out[unknown_index(k, flow, 1)] = scale * v.y;
        }
    }
    out
}

/// Sparse Jacobian, one list of `(unknown, value)` per residual.
#[derive(Clone, Debug, Default)]
pub struct SparseJacobian {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub cols: usize,
}

impl SparseJacobian {
    pub fn column(&self, col: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().filter(|e| e.0 == col).map(|e| e.1).sum())
            .collect()
    }

    /// `J^T J` as a dense matrix; meant for small instances.
    pub fn normal_matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.cols, self.cols);
        for row in &self.rows {
            for &(i, a) in row {
                for &(j, b) in row {
                    m[(i, j)] += a * b;
                }
            }
        }
        m
    }

    pub fn transpose_mul(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &ri) in self.rows.iter().zip(r) {
            for &(j, v) in row {
                out[j] += v * ri;
            }
        }
        out
    }
}

/// Everything needed to evaluate the energy of one hierarchy level with
/// frozen weights. The unknowns are the level's delta flows; residuals see
/// the accumulated flow `base + delta`.
#[derive(Clone, Copy)]
pub struct LevelProblem<'a> {
    pub images: &'a [SplineImage; 4],
    /// Additive intensity correction per view and halfway pixel.
    pub illumination: &'a [Vec<f64>; 4],
    pub weights: &'a PixelWeights,
    pub base: &'a WarpGrid,
    pub params: &'a EnergyParams,
    /// Fundamental matrix in this level's pixel coordinates.
    pub fundamental: Option<&'a Matrix3<f64>>,
    /// Which of s, m, d are unknowns.
    pub active: [bool; 3],
}

impl<'a> LevelProblem<'a> {
    pub fn width(&self) -> usize {
        self.base.width()
    }

    pub fn height(&self) -> usize {
        self.base.height()
    }

    pub fn pixels(&self) -> usize {
        self.width() * self.height()
    }

    pub fn nodes(&self) -> usize {
        self.base.node_count()
    }

    pub fn unknowns(&self) -> usize {
        NODE_DOF * self.nodes()
    }

    pub fn active_unknowns(&self) -> usize {
        2 * self.nodes() * self.active.iter().filter(|a| **a).count()
    }

    pub fn accumulated(&self, delta: &WarpGrid) -> WarpGrid {
        self.base.added(delta)
    }

    #[inline]
    pub fn illumination_at(&self, pixel: usize) -> [f64; 4] {
        std::array::from_fn(|v| self.illumination[v][pixel])
    }

    /// View samples of halfway pixel `(x, y)` under accumulated flow `acc`.
    #[inline]
    pub fn pixel_samples(&self, acc: &WarpGrid, x: usize, y: usize) -> [SplineSample; 4] {
        let f = acc.flow_clamped(x as f64, y as f64);
        let pixel = y * self.width() + x;
        sample_views(
            self.images,
            Vec2::new(x as f64, y as f64),
            &f,
            self.illumination_at(pixel),
        )
    }

    /// Per-pixel photo/gradient residuals and flow derivatives, row-major.
    pub fn pixel_linearizations(&self, acc: &WarpGrid) -> Vec<PixelLinearization> {
        let w = self.width();
        let mut out = vec![PixelLinearization::default(); self.pixels()];
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, slot) in row.iter_mut().enumerate() {
                let mask = self.weights.mask(y * w + x);
                if mask == 0 {
                    continue;
                }
                let samples = self.pixel_samples(acc, x, y);
                *slot = linearize_pixel(&samples, mask, self.params);
            }
        });
        out
    }

    fn alignment_residuals(&self, acc: &WarpGrid) -> (Vec<f64>, Vec<f64>) {
        let w = self.width();
        let n = self.pixels();
        let mut photo = vec![0.0; n];
        let mut grad = vec![0.0; n];
        photo
            .par_chunks_mut(w)
            .zip(grad.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (prow, grow))| {
                for x in 0..w {
                    let mask = self.weights.mask(y * w + x);
                    if mask == 0 {
                        continue;
                    }
                    let checks = checks_from_samples(&self.pixel_samples(acc, x, y));
                    prow[x] = photo_residual(&checks, mask, self.params);
                    grow[x] = grad_residual(&checks, mask, self.params);
                }
            });
        (photo, grad)
    }

    pub fn residuals(&self, delta: &WarpGrid) -> ResidualVector {
        let acc = self.accumulated(delta);
        self.residuals_with(&acc, delta)
    }

    pub(crate) fn residuals_with(&self, acc: &WarpGrid, delta: &WarpGrid) -> ResidualVector {
        let (photo, grad) = self.alignment_residuals(acc);
        let mut values = photo;
        values.extend(grad);
        values.extend(smooth_residuals(acc, &self.weights.feature, self.params));
        values.extend(epi_residuals(acc, self.fundamental, self.params));
        values.extend(mag_residuals(delta, self.params));
        let out = ResidualVector {
            values,
            pixels: self.pixels(),
            nodes: self.nodes(),
        };
        assert_eq!(out.len(), ResidualVector::expected_len(out.pixels, out.nodes));
        out
    }

    pub fn energy(&self, delta: &WarpGrid) -> f64 {
        self.residuals(delta).energy()
    }

    /// Analytic Jacobian of [`Self::residuals`] w.r.t. the active delta
    /// unknowns. Columns of pinned flows are left empty.
    pub fn jacobian(&self, delta: &WarpGrid) -> SparseJacobian {
        let acc = self.accumulated(delta);
        let (w, h) = (self.width(), self.height());
        let n = self.pixels();
        let g = self.nodes();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 2 * n + 14 * g];
        let lin = self.pixel_linearizations(&acc);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let weights = acc.weights_clamped(x as f64, y as f64);
                for (t, row) in [p, n + p].into_iter().enumerate() {
                    for &(k, alpha) in &weights {
                        if alpha == 0.0 {
                            continue;
                        }
                        for flow in Flow::ALL {
                            if !self.active[flow.index()] {
                                continue;
                            }
                            for axis in 0..2 {
                                let v = alpha * lin[p].j[t][2 * flow.index() + axis];
                                if v != 0.0 {
                                    rows[row].push((unknown_index(k, flow, axis), v));
                                }
                            }
                        }
                    }
                }
            }
        }
        let (gw, gh) = (acc.grid_w(), acc.grid_h());
        let smooth = smooth_residuals(&acc, &self.weights.feature, self.params);
        for b in 0..gh {
            for a in 0..gw {
                let i = b * gw + a;
                for flow in Flow::ALL {
                    if !self.active[flow.index()] {
                        continue;
                    }
                    let c = self.params.w_smooth
                        * self.params.w_reg
                        * self.weights.feature[i]
                        * self.params.smooth_weight(flow);
                    let field = acc.field(flow);
                    for axis in 0..2 {
                        let ri = unknown_index(i, flow, axis);
                        let r = smooth[ri];
                        if r == 0.0 {
                            continue;
                        }
                        let row = &mut rows[2 * n + ri];
                        let mut di = 0.0;
                        for j in forward_neighbours(a, b, gw, gh) {
                            let diff = field[i][axis] - field[j][axis];
                            di += c * diff / r;
                            row.push((unknown_index(j, flow, axis), -c * diff / r));
                        }
                        row.push((unknown_index(i, flow, axis), di));
                    }
                }
            }
        }
        if let Some(f) = self.fundamental {
            let scale = (self.params.w_epi * self.params.w_reg).sqrt();
            for k in 0..g {
                for t in 0..2 {
                    let (_, d) = epipolar_linearization(&acc, k, t, f);
                    let row = &mut rows[2 * n + 6 * g + 2 * k + t];
                    for flow in Flow::ALL {
                        if !self.active[flow.index()] {
                            continue;
                        }
                        for axis in 0..2 {
                            let q = 2 * flow.index() + axis;
                            row.push((unknown_index(k, flow, axis), scale * d[q]));
                        }
                    }
                }
            }
        }
        for flow in Flow::ALL {
            if !self.active[flow.index()] {
                continue;
            }
            let scale = (self.params.w_mag * self.params.w_reg * self.params.mag_weight(flow)).sqrt();
            for k in 0..g {
                for axis in 0..2 {
                    let u = unknown_index(k, flow, axis);
                    rows[2 * n + 8 * g + u].push((u, scale));
                }
            }
        }
        SparseJacobian {
            rows,
            cols: NODE_DOF * g,
        }
    }
}

/// Outlier test per halfway pixel: mean absolute residual over the visible
/// checks must stay below `eps_color`.
pub fn compute_inliers(
    images: &[SplineImage; 4],
    illumination: &[Vec<f64>; 4],
    acc: &WarpGrid,
    visibility: &[CheckMask],
    eps_color: f64,
) -> Vec<bool> {
    let w = acc.width();
    let mut out = vec![true; acc.width() * acc.height()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            let p = y * w + x;
            let mask = visibility[p];
            if mask == 0 {
                continue;
            }
            let f = acc.flow_clamped(x as f64, y as f64);
            let illum = std::array::from_fn(|v| illumination[v][p]);
            let samples = sample_views(images, Vec2::new(x as f64, y as f64), &f, illum);
            let checks = checks_from_samples(&samples);
            let (mut sum, mut count) = (0.0, 0usize);
            for k in 0..6 {
                if mask & (1 << k) != 0 {
                    sum += checks.d[k].abs();
                    count += 1;
                }
            }
            *slot = sum / (count as f64) < eps_color;
        }
    });
    out
}

/// Average of the four warped views, i.e. the image seen in the halfway frame.
pub fn halfway_image(images: &[SplineImage; 4], illumination: &[Vec<f64>; 4], acc: &WarpGrid) -> Image {
    let w = acc.width();
    let h = acc.height();
    let mut data = vec![0.0; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            let f = acc.flow_clamped(x as f64, y as f64);
            let p = y * w + x;
            let mut sum = 0.0;
            for v in VIEWS {
                let q = warp_position(Vec2::new(x as f64, y as f64), &f, v.camera, v.time);
                sum += images[v.index()].value(q.x, q.y) + illumination[v.index()][p];
            }
            *slot = 0.25 * sum;
        }
    });
    Image::new(w, h, data).expect("finite halfway image")
}

/// Feature weights at every warp grid node, from the halfway image.
pub fn compute_feature_weights(
    images: &[SplineImage; 4],
    illumination: &[Vec<f64>; 4],
    acc: &WarpGrid,
) -> Vec<f64> {
    let img = halfway_image(images, illumination, acc);
    (0..acc.node_count())
        .map(|k| {
            let p = acc.node_position(k);
            let x = (p.x as usize).min(img.width() - 1);
            let y = (p.y as usize).min(img.height() - 1);
            structure_weight(&img, x, y)
        })
        .collect()
}

/// Checks of halfway pixel `(x, y)` under accumulated flow `acc`.
pub fn checks_at(images: &[SplineImage; 4], acc: &WarpGrid, x: usize, y: usize, illumination: [f64; 4]) -> CheckSet {
    let f = acc.flow_clamped(x as f64, y as f64);
    checks_from_samples(&sample_views(images, Vec2::new(x as f64, y as f64), &f, illumination))
}

/// Per-pixel flow of an accumulated grid, row-major.
pub fn pixel_flows(acc: &WarpGrid) -> Vec<PixelFlow> {
    let w = acc.width();
    let h = acc.height();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(acc.flow_clamped(x as f64, y as f64));
        }
    }
    out
}
