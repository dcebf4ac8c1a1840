//! Coarse-to-fine driver over a hierarchy of delta flows.
//!
//! Each level solves for an offset to the prolongated result of the next
//! coarser level, then refreshes occlusion and illumination maps from the
//! new flow and hands all three to the next finer level.

mod maps;

pub use maps::{
    bilinear, compute_illumination_maps, compute_occlusion_maps, fine_to_coarse, IlluminationMaps, OcclusionMaps,
    ILLUMINATION_SIGMA, NEARNESS_TOLERANCE,
};

use std::path::Path;
use std::time::Instant;

use crate::domain::{Flow, PixelFlow, Vec2, WarpGrid, CHECKS};
use crate::energy::{checks_at, EnergyParams, PixelWeights, ResidualVector, ALL_CHECKS};
use crate::error::{Error, Result};
use crate::geometry::{FlowResult, StereoRig};
use crate::image::{level_dims, save_png8, Image, Pyramid, SplineImage};
use crate::solver::{gauss_newton, GnIteration, LevelInput, SolverSettings};

/// Smallest short side of the coarsest level.
pub const MIN_LEVEL_SIDE: usize = 16;

/// Level and iteration schedule of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub levels: usize,
    /// Gauss-Newton iterations per level, finest first; the last entry
    /// repeats for coarser levels.
    pub gn_iters: Vec<usize>,
    pub pcg_iters: usize,
    pub patch_iters: usize,
    pub grid_step: usize,
    /// Subdomain side in pixels; 0 solves each linear system globally.
    pub subdomain_px: usize,
    pub ring_px: usize,
    pub lm_boost: f64,
    /// Solve only the finest level, with all iterations of the schedule.
    pub single_level: bool,
    pub occlusion: bool,
    pub illumination: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            levels: 5,
            gn_iters: vec![2, 2, 5, 5, 5],
            pcg_iters: 5,
            patch_iters: 5,
            grid_step: 2,
            subdomain_px: 16,
            ring_px: 2,
            lm_boost: 0.0,
            single_level: false,
            occlusion: true,
            illumination: true,
        }
    }
}

impl Schedule {
    pub fn gn_for(&self, level: usize) -> usize {
        self.gn_iters
            .get(level)
            .or(self.gn_iters.last())
            .copied()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidParameter("levels must be >= 1".into()));
        }
        if !matches!(self.grid_step, 1 | 2 | 4) {
            return Err(Error::InvalidParameter(format!("grid step must be 1, 2 or 4, got {}", self.grid_step)));
        }
        if self.gn_iters.is_empty() {
            return Err(Error::InvalidParameter("gn_iters needs at least one entry".into()));
        }
        if self.pcg_iters == 0 || self.patch_iters == 0 {
            return Err(Error::InvalidParameter("pcg_iters and patch_iters must be >= 1".into()));
        }
        if !(self.lm_boost >= 0.0 && self.lm_boost.is_finite()) {
            return Err(Error::InvalidParameter(format!("lm_boost must be >= 0, got {}", self.lm_boost)));
        }
        Ok(())
    }

    /// Levels actually used for a `width x height` input.
    pub fn effective_levels(&self, width: usize, height: usize) -> usize {
        if self.single_level {
            return 1;
        }
        let mut levels = 1;
        while levels < self.levels {
            let (w, h) = level_dims(width, height, levels);
            if w.min(h) < MIN_LEVEL_SIDE {
                break;
            }
            levels += 1;
        }
        levels
    }

    fn solver_settings(&self, level: usize) -> SolverSettings {
        let gn_iters = if self.single_level {
            (0..self.levels).map(|l| self.gn_for(l)).sum()
        } else {
            self.gn_for(level)
        };
        SolverSettings {
            gn_iters,
            pcg_iters: self.pcg_iters,
            patch_iters: self.patch_iters,
            subdomain_px: self.subdomain_px,
            ring_px: self.ring_px,
            lm_boost: self.lm_boost,
        }
    }
}

/// Solved state of one level.
#[derive(Clone, Debug)]
pub struct LevelState {
    pub delta: WarpGrid,
    pub accumulated: WarpGrid,
    /// Maps computed from this level's result.
    pub occlusion: OcclusionMaps,
    pub illumination: IlluminationMaps,
}

/// Hierarchy after a run, finest level first.
#[derive(Clone, Debug)]
pub struct HierarchyState {
    pub levels: Vec<LevelState>,
}

impl HierarchyState {
    pub fn deltas(&self) -> Vec<WarpGrid> {
        self.levels.iter().map(|l| l.delta.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub nodes: usize,
    pub unknowns: usize,
    pub residuals: usize,
    pub iterations: Vec<GnIteration>,
    pub energy_initial: f64,
    pub energy_final: f64,
    /// Pixels occluded in each view after the level.
    pub occluded: [usize; 4],
    /// Mean `|d_k|` over pixels where check `k` is visible, with the
    /// refreshed illumination maps.
    pub mean_abs_checks: [f64; 6],
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Coarsest level first.
    pub levels: Vec<LevelReport>,
    /// Energy of the initialization at the finest level, before solving.
    pub initial_energy: f64,
    pub final_energy: f64,
    pub elapsed_ms: f64,
}

pub struct SceneFlowOutput {
    pub result: FlowResult,
    pub state: HierarchyState,
    pub report: RunReport,
}

/// Everything fixed across the frames of a sequence.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub params: &'a EnergyParams,
    pub schedule: &'a Schedule,
    pub rig: Option<&'a StereoRig>,
    /// Pins motion and difference flow at zero.
    pub stereo_only: bool,
    pub dump_dir: Option<&'a Path>,
}

/// Runs the full hierarchy on one window of four images.
pub fn run_scene_flow(
    images: &[Image; 4],
    rig: Option<&StereoRig>,
    params: &EnergyParams,
    schedule: &Schedule,
    prev: Option<&HierarchyState>,
) -> Result<SceneFlowOutput> {
    Pipeline {
        params,
        schedule,
        rig,
        stereo_only: false,
        dump_dir: None,
    }
    .run(images, prev)
}

impl Pipeline<'_> {
    fn active(&self) -> [bool; 3] {
        [true, !self.stereo_only, !self.stereo_only]
    }

    pub fn run(&self, images: &[Image; 4], prev: Option<&HierarchyState>) -> Result<SceneFlowOutput> {
        let start = Instant::now();
        self.params.validate()?;
        self.schedule.validate()?;
        let (w, h) = (images[0].width(), images[0].height());
        if let Some(i) = images.iter().position(|img| img.width() != w || img.height() != h) {
            return Err(Error::DimensionMismatch(format!(
                "image {i} is {}x{}, image 0 is {w}x{h}",
                images[i].width(),
                images[i].height()
            )));
        }
        if self.params.w_epi > 0.0 && self.rig.is_none() {
            return Err(Error::Calibration("w_epi > 0 requires a calibration".into()));
        }
        let levels = self.schedule.effective_levels(w, h);
        let step = self.schedule.grid_step;
        let pyramids: Vec<Pyramid> = images
            .iter()
            .map(|img| Pyramid::build(img.clone(), levels))
            .collect::<Result<_>>()?;

        let mut init = match prev {
            Some(state) => {
                let deltas = propagate_temporal(state);
                check_layout(&deltas, w, h, levels, step)?;
                deltas
            }
            None => (0..levels)
                .map(|l| {
                    let (lw, lh) = level_dims(w, h, l);
                    WarpGrid::zeros(lw, lh, step)
                })
                .collect(),
        };
        if self.stereo_only {
            for d in &mut init {
                d.field_mut(Flow::Motion).fill(Vec2::zeros());
                d.field_mut(Flow::Difference).fill(Vec2::zeros());
            }
        }
        let splines0 = images.clone().map(|i| SplineImage::new(&i));
        let initial_energy = self.initial_energy(&splines0, &init)?;

        let mut states: Vec<Option<LevelState>> = vec![None; levels];
        let mut reports = Vec::with_capacity(levels);
        for level in (0..levels).rev() {
            let level_start = Instant::now();
            let (lw, lh) = level_dims(w, h, level);
            let splines: [SplineImage; 4] = if level == 0 {
                splines0.clone()
            } else {
                std::array::from_fn(|v| SplineImage::new(pyramids[v].level(level)))
            };
            let (base, occlusion, illumination) = match &states.get(level + 1).and_then(|s| s.as_ref()) {
                Some(coarse) => (
                    prolongate(&coarse.accumulated, lw, lh, step),
                    coarse.occlusion.prolongate(lw, lh),
                    coarse.illumination.prolongate(lw, lh),
                ),
                None => (
                    WarpGrid::zeros(lw, lh, step),
                    OcclusionMaps::all_visible(lw, lh),
                    IlluminationMaps::zeros(lw, lh),
                ),
            };
            let visibility = occlusion.check_masks();
            let fundamental = self.rig.map(|r| r.level_fundamental(level));
            let input = LevelInput {
                images: &splines,
                illumination: &illumination.maps,
                visibility: &visibility,
                base: &base,
                params: self.params,
                fundamental: fundamental.as_ref(),
                active: self.active(),
                level,
            };
            let sol = gauss_newton(&input, init[level].clone(), &self.schedule.solver_settings(level))?;
            let accumulated = base.added(&sol.delta);

            let occlusion = if self.schedule.occlusion {
                compute_occlusion_maps(&accumulated)
            } else {
                OcclusionMaps::all_visible(lw, lh)
            };
            let illumination = if self.schedule.illumination {
                compute_illumination_maps(&splines, &accumulated, &occlusion)?
            } else {
                IlluminationMaps::zeros(lw, lh)
            };
            let nodes = base.node_count();
            let energy_initial = sol.iterations.first().map_or(f64::NAN, |i| i.energy_before);
            let energy_final = match sol.iterations.last() {
                Some(i) => i.energy_after,
                None => input.problem(&sol.weights).energy(&sol.delta),
            };
            reports.push(LevelReport {
                level,
                width: lw,
                height: lh,
                nodes,
                unknowns: 2 * nodes * self.active().iter().filter(|a| **a).count(),
                residuals: ResidualVector::expected_len(lw * lh, nodes),
                iterations: sol.iterations,
                energy_initial,
                energy_final,
                occluded: std::array::from_fn(|v| occlusion.occluded_count(v)),
                mean_abs_checks: mean_abs_checks(&splines, &illumination, &occlusion, &accumulated),
                elapsed_ms: level_start.elapsed().as_secs_f64() * 1e3,
            });
            let state = LevelState {
                delta: sol.delta,
                accumulated,
                occlusion,
                illumination,
            };
            if let Some(dir) = self.dump_dir {
                dump_level(dir, level, &state)?;
            }
            states[level] = Some(state);
        }

        let state = HierarchyState {
            levels: states.into_iter().map(|s| s.expect("every level solved")).collect(),
        };
        let finest = &state.levels[0];
        let visible = (0..w * h)
            .map(|p| finest.occlusion.visible.iter().all(|m| m[p]))
            .collect();
        let result = FlowResult::from_grid(&finest.accumulated, visible, self.rig);
        let final_energy = reports.last().map_or(f64::NAN, |r| r.energy_final);
        Ok(SceneFlowOutput {
            result,
            state,
            report: RunReport {
                levels: reports,
                initial_energy,
                final_energy,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            },
        })
    }

    /// Energy of the collapsed initialization at the finest level, with all
    /// pixels visible and no illumination correction.
    fn initial_energy(&self, images: &[SplineImage; 4], init: &[WarpGrid]) -> Result<f64> {
        let acc = collapse(init);
        let (w, h, step) = (init[0].width(), init[0].height(), init[0].step());
        let base = match acc.get(1) {
            Some(coarse) => prolongate(coarse, w, h, step),
            None => WarpGrid::zeros(w, h, step),
        };
        let visibility = vec![ALL_CHECKS; w * h];
        let illumination: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; w * h]);
        let fundamental = self.rig.map(|r| r.level_fundamental(0));
        let input = LevelInput {
            images,
            illumination: &illumination,
            visibility: &visibility,
            base: &base,
            params: self.params,
            fundamental: fundamental.as_ref(),
            active: self.active(),
            level: 0,
        };
        let weights: PixelWeights = input.initial_weights(&init[0]);
        Ok(input.problem(&weights).energy(&init[0]))
    }
}

/// Upsamples a coarse accumulated flow to the next finer level: bilinear
/// interpolation, values doubled.
pub fn prolongate(coarse: &WarpGrid, width: usize, height: usize, step: usize) -> WarpGrid {
    let mut fine = WarpGrid::zeros(width, height, step);
    for k in 0..fine.node_count() {
        let p = fine.node_position(k);
        let (x, y) = (p.x.min((width - 1) as f64), p.y.min((height - 1) as f64));
        let cx = (x - 0.5) / 2.0;
        let cy = (y - 0.5) / 2.0;
        let f = coarse.flow_clamped(cx, cy);
        fine.set_node(k, PixelFlow::new(f.s * 2.0, f.m * 2.0, f.d * 2.0));
    }
    fine
}

/// Accumulated flows of a delta hierarchy (finest first), by repeated
/// prolongation and addition from the coarsest level.
pub fn collapse(deltas: &[WarpGrid]) -> Vec<WarpGrid> {
    let mut out: Vec<WarpGrid> = Vec::with_capacity(deltas.len());
    for delta in deltas.iter().rev() {
        let acc = match out.last() {
            Some(coarse) => prolongate(coarse, delta.width(), delta.height(), delta.step()).added(delta),
            None => delta.clone(),
        };
        out.push(acc);
    }
    out.reverse();
    out
}

/// Initial deltas for the next frame: every level's delta advected along
/// that level's accumulated motion (full inter-frame motion `2m`), by
/// gathering from `p - 2m(p)`. Samples beyond the grid take the nearest
/// border value.
pub fn propagate_temporal(prev: &HierarchyState) -> Vec<WarpGrid> {
    prev.levels
        .iter()
        .map(|level| {
            let mut next = WarpGrid::zeros(level.delta.width(), level.delta.height(), level.delta.step());
            let motion = level.accumulated.field(Flow::Motion);
            for k in 0..next.node_count() {
                let src = next.node_position(k) - 2.0 * motion[k];
                next.set_node(k, level.delta.flow_clamped(src.x, src.y));
            }
            next
        })
        .collect()
}

fn check_layout(deltas: &[WarpGrid], w: usize, h: usize, levels: usize, step: usize) -> Result<()> {
    let ok = deltas.len() == levels
        && deltas.iter().enumerate().all(|(l, d)| {
            let (lw, lh) = level_dims(w, h, l);
            d.width() == lw && d.height() == lh && d.step() == step
        });
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(
            "previous frame's hierarchy does not match this frame's size, levels or grid step".into(),
        ))
    }
}

fn mean_abs_checks(
    images: &[SplineImage; 4],
    illumination: &IlluminationMaps,
    occlusion: &OcclusionMaps,
    acc: &WarpGrid,
) -> [f64; 6] {
    let w = acc.width();
    let masks = occlusion.check_masks();
    let mut sum = [0.0; 6];
    let mut count = [0usize; 6];
    for (p, mask) in masks.iter().enumerate() {
        if *mask == 0 {
            continue;
        }
        let illum = std::array::from_fn(|v| illumination.maps[v][p]);
        let checks = checks_at(images, acc, p % w, p / w, illum);
        for k in 0..CHECKS.len() {
            if mask & (1 << k) != 0 {
                sum[k] += checks.d[k].abs();
                count[k] += 1;
            }
        }
    }
    std::array::from_fn(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 })
}

fn dump_level(dir: &Path, level: usize, state: &LevelState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (state.occlusion.width, state.occlusion.height);
    for v in 0..4 {
        let occ = Image::from_fn(w, h, |x, y| f64::from(u8::from(state.occlusion.visible[v][y * w + x])));
        save_png8(&occ, dir.join(format!("level{level}_visible_v{v}.png")))?;
        let il = Image::from_fn(w, h, |x, y| 0.5 + 2.5 * state.illumination.maps[v][y * w + x]);
        save_png8(&il, dir.join(format!("level{level}_illumination_v{v}.png")))?;
    }
    let flows = crate::energy::pixel_flows(&state.accumulated);
    for flow in Flow::ALL {
        let mag: Vec<f64> = flows.iter().map(|f| f.get(flow).norm()).collect();
        let max = mag.iter().fold(0.0f64, |m, v| m.max(*v)).max(1e-12);
        let img = Image::from_fn(w, h, |x, y| mag[y * w + x] / max);
        save_png8(&img, dir.join(format!("level{level}_flow_{}.png", flow.name())))?;
    }
    Ok(())
}
