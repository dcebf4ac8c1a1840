//! Finite-difference check of the analytic Jacobian on random instances.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Flow, PixelFlow, Vec2, WarpGrid};
use crate::energy::{EnergyParams, LevelProblem, PixelWeights, Preset, NODE_DOF};
use crate::error::{Error, Result};
use crate::geometry::rectified_fundamental;
use crate::image::{Image, SplineImage};
use crate::synth::ProceduralTexture;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub width: usize,
    pub height: usize,
    pub step: usize,
    pub seed: u64,
    pub eps_huber: f64,
    /// Central difference step.
    pub h: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            width: 16,
            height: 16,
            step: 2,
            seed: 1,
            eps_huber: 0.001,
            h: 1e-5,
        }
    }
}

/// Random state: textured views with sub-pixel offsets, random base and
/// delta flows, illumination offsets, visibility bits, outliers and
/// feature weights, and an active epipolar term.
pub struct Instance {
    pub images: [SplineImage; 4],
    pub illumination: [Vec<f64>; 4],
    pub weights: PixelWeights,
    pub base: WarpGrid,
    pub delta: WarpGrid,
    pub params: EnergyParams,
    pub fundamental: Matrix3<f64>,
}

impl Instance {
    pub fn random(opts: &GradCheckOptions) -> Result<Self> {
        let (w, h) = (opts.width, opts.height);
        if w < 2 || h < 2 || opts.step == 0 {
            return Err(Error::InvalidParameter(format!("instance {w}x{h} with step {}", opts.step)));
        }
        let mut params = EnergyParams::preset(Preset::Facial);
        params.w_epi = 0.7;
        params.eps_huber = opts.eps_huber;
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let texture = ProceduralTexture::new(opts.seed, 5.0, 20.0, 2)?;
        let images = std::array::from_fn(|_| {
            let (ox, oy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            SplineImage::new(&Image::from_fn(w, h, |x, y| texture.value(x as f64 + ox, y as f64 + oy)))
        });
        let illumination = std::array::from_fn(|_| (0..w * h).map(|_| rng.gen_range(-0.05..0.05)).collect());
        let mut random_grid = |scale: f64| {
            let mut g = WarpGrid::zeros(w, h, opts.step);
            for k in 0..g.node_count() {
                let mut v = || Vec2::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale));
                g.set_node(k, PixelFlow::new(v(), v(), v()));
            }
            g
        };
        let base = random_grid(0.7);
        let delta = random_grid(0.3);
        let mut weights = PixelWeights::uniform(w * h, base.node_count());
        for v in weights.visibility.iter_mut() {
            *v = rng.gen_range(0..64);
        }
        for i in weights.inlier.iter_mut() {
            *i = rng.gen_bool(0.9);
        }
        for f in weights.feature.iter_mut() {
            *f = rng.gen_range(1.0..10.0);
        }
        Ok(Instance {
            images,
            illumination,
            weights,
            base,
            delta,
            params,
            fundamental: rectified_fundamental(),
        })
    }

    pub fn problem(&self) -> LevelProblem<'_> {
        LevelProblem {
            images: &self.images,
            illumination: &self.illumination,
            weights: &self.weights,
            base: &self.base,
            params: &self.params,
            fundamental: Some(&self.fundamental),
            active: [true; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_j |J_j - FD_j| / max(|FD_j|, |J_j|, 1e-8)` over columns `j`
    /// (Euclidean norms).
    pub max_rel_error: f64,
    pub worst_unknown: usize,
    /// Residual with the largest absolute deviation in the worst column.
    pub worst_residual: usize,
    pub unknowns: usize,
    pub residuals: usize,
}

/// Compares every Jacobian column with central differences of the
/// residual vector.
pub fn check_instance(inst: &Instance, h: f64) -> GradCheckReport {
    let problem = inst.problem();
    let jac = problem.jacobian(&inst.delta);
    let cols = problem.unknowns();
    let rows = jac.rows.len();
    let mut columns = vec![Vec::new(); cols];
    for (r, row) in jac.rows.iter().enumerate() {
        for &(c, v) in row {
            columns[c].push((r, v));
        }
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_unknown: 0,
        worst_residual: 0,
        unknowns: cols,
        residuals: rows,
    };
    for (col, entries) in columns.iter().enumerate() {
        let node = col / NODE_DOF;
        let flow = Flow::ALL[(col % NODE_DOF) / 2];
        let axis = col % 2;
        let mut analytic = vec![0.0; rows];
        for &(r, v) in entries {
            analytic[r] += v;
        }
        let mut plus = inst.delta.clone();
        plus.field_mut(flow)[node][axis] += h;
        let mut minus = inst.delta.clone();
        minus.field_mut(flow)[node][axis] -= h;
        let rp = problem.residuals(&plus).values;
        let rm = problem.residuals(&minus).values;
        let (mut diff2, mut fd2, mut an2) = (0.0, 0.0, 0.0);
        let (mut worst_abs, mut worst_row) = (0.0, 0);
        for r in 0..rows {
            let fd = (rp[r] - rm[r]) / (2.0 * h);
            let d = (analytic[r] - fd).abs();
            diff2 += d * d;
            fd2 += fd * fd;
            an2 += analytic[r] * analytic[r];
            if d > worst_abs {
                worst_abs = d;
                worst_row = r;
            }
        }
        let rel = diff2.sqrt() / fd2.sqrt().max(an2.sqrt()).max(1e-8);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_unknown = col;
            report.worst_residual = worst_row;
        }
    }
    report
}

/// Builds a random instance and checks it. With `corrupt_warp_sign` the
/// residuals are evaluated with a wrong warp sign (negative control); the
/// check then runs on a private single-thread pool so the fault stays
/// contained.
pub fn run(opts: &GradCheckOptions, corrupt_warp_sign: bool) -> Result<GradCheckReport> {
    let inst = Instance::random(opts)?;
    if !corrupt_warp_sign {
        return Ok(check_instance(&inst, opts.h));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        crate::domain::hooks::set_corrupt_warp_sign(true);
        let report = check_instance(&inst, opts.h);
        crate::domain::hooks::set_corrupt_warp_sign(false);
        report
    }))
}
