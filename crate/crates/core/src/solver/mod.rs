//! Gauss-Newton on the stacked residuals, with PCG inner solves distributed
//! over Schwarz subdomains.

mod normal;
mod pcg;
mod schwarz;

pub use normal::{add_flat, flatten, Block, NormalSystem, DOWN, DOWN_LEFT, DOWN_RIGHT, RIGHT, SELF};
pub use pcg::{dot, pcg, DenseOperator, LinearOperator, PcgResult};
pub use schwarz::{schwarz_solve, SchwarzResult, Subdomain, Tiling};

use nalgebra::Matrix3;

use crate::domain::WarpGrid;
use crate::energy::{
    compute_feature_weights, compute_inliers, CheckMask, EnergyParams, LevelProblem, PixelWeights,
};
use crate::error::{Error, Result};
use crate::image::SplineImage;

/// Iteration counts of one level's solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverSettings {
    pub gn_iters: usize,
    pub pcg_iters: usize,
    pub patch_iters: usize,
    /// Subdomain side in pixels; 0 solves globally.
    pub subdomain_px: usize,
    pub ring_px: usize,
    /// Levenberg-style diagonal boost, 0 = off.
    pub lm_boost: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            gn_iters: 5,
            pcg_iters: 5,
            patch_iters: 5,
            subdomain_px: 16,
            ring_px: 2,
            lm_boost: 0.0,
        }
    }
}

/// Inputs of one level that stay fixed while it is solved.
#[derive(Clone, Copy)]
pub struct LevelInput<'a> {
    pub images: &'a [SplineImage; 4],
    pub illumination: &'a [Vec<f64>; 4],
    pub visibility: &'a [CheckMask],
    pub base: &'a WarpGrid,
    pub params: &'a EnergyParams,
    pub fundamental: Option<&'a Matrix3<f64>>,
    pub active: [bool; 3],
    /// Hierarchy level, for diagnostics.
    pub level: usize,
}

impl<'a> LevelInput<'a> {
    /// Weights at the start of a level: every pixel an inlier, feature
    /// weights from the halfway image under the initial flow.
    pub fn initial_weights(&self, delta: &WarpGrid) -> PixelWeights {
        let acc = self.base.added(delta);
        PixelWeights {
            visibility: self.visibility.to_vec(),
            inlier: vec![true; self.visibility.len()],
            feature: compute_feature_weights(self.images, self.illumination, &acc),
        }
    }

    /// Recomputes the outlier bits at the current flow.
    pub fn refresh_inliers(&self, weights: &mut PixelWeights, delta: &WarpGrid) {
        let acc = self.base.added(delta);
        weights.inlier = compute_inliers(
            self.images,
            self.illumination,
            &acc,
            self.visibility,
            self.params.eps_color,
        );
    }

    pub fn problem(&self, weights: &'a PixelWeights) -> LevelProblem<'a> {
        LevelProblem {
            images: self.images,
            illumination: self.illumination,
            weights,
            base: self.base,
            params: self.params,
            fundamental: self.fundamental,
            active: self.active,
        }
    }
}

/// Record of one Gauss-Newton iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct GnIteration {
    /// Energy at the linearization point.
    pub energy_before: f64,
    /// Energy after the step, with the same frozen weights.
    pub energy_after: f64,
    /// Linearized energy after every PCG iteration.
    pub linear_energy: Vec<f64>,
    pub step_max: f64,
}

#[derive(Clone, Debug)]
pub struct LevelSolution {
    pub delta: WarpGrid,
    /// Weights of the last linearization.
    pub weights: PixelWeights,
    pub iterations: Vec<GnIteration>,
}

/// Plain Gauss-Newton with full steps: refresh outlier bits, linearize,
/// solve with Schwarz/PCG, apply. The first iteration treats every pixel as
/// an inlier.
pub fn gauss_newton(input: &LevelInput<'_>, delta0: WarpGrid, settings: &SolverSettings) -> Result<LevelSolution> {
    let mut delta = delta0;
    let mut weights = input.initial_weights(&delta);
    let tiling = if settings.subdomain_px == 0 {
        Tiling::single(input.base.grid_w(), input.base.grid_h())
    } else {
        Tiling::new(
            input.base.grid_w(),
            input.base.grid_h(),
            input.base.step(),
            settings.subdomain_px,
            settings.ring_px,
        )
    };
    let mut iterations = Vec::with_capacity(settings.gn_iters);
    for it in 0..settings.gn_iters {
        if it > 0 {
            input.refresh_inliers(&mut weights, &delta);
        }
        let problem = input.problem(&weights);
        check_residuals(&problem, &delta, input.level)?;
        let sys = NormalSystem::build(&problem, &delta, settings.lm_boost)?;
        let sol = schwarz_solve(&sys, &tiling, settings.patch_iters, settings.pcg_iters)?;
        let step_max = sol.step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        add_flat(&mut delta, &sol.step);
        let energy_after = problem.energy(&delta);
        iterations.push(GnIteration {
            energy_before: sys.energy(),
            energy_after,
            linear_energy: sol.linear_energy,
            step_max,
        });
    }
    if !delta.is_finite() {
        return Err(Error::NonFiniteResidual {
            level: input.level,
            residual: 0,
        });
    }
    Ok(LevelSolution {
        delta,
        weights,
        iterations,
    })
}

fn check_residuals(problem: &LevelProblem<'_>, delta: &WarpGrid, level: usize) -> Result<()> {
    let r = problem.residuals(delta);
    match r.values.iter().position(|v| !v.is_finite()) {
        Some(residual) => Err(Error::NonFiniteResidual { level, residual }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests;
