//! Disparity only: both time steps get the same pair and motion is pinned.

use halfway_sceneflow::energy::EnergyParams;
use halfway_sceneflow::hierarchy::{Pipeline, Schedule};
use halfway_sceneflow::synth::{interior_mask, percentile, SceneSpec};

fn main() -> halfway_sceneflow::Result<()> {
    // 8 px disparity = half-shift 4
    let scene = SceneSpec::constant_disparity(128, 128, 4.0, 3).window(0)?;
    let [l, r, _, _] = scene.images.clone();
    let images = [l.clone(), r.clone(), l, r];
    let params = EnergyParams::default();
    let schedule = Schedule {
        levels: 4,
        ..Schedule::default()
    };
    let out = Pipeline {
        params: &params,
        schedule: &schedule,
        rig: None,
        stereo_only: true,
        dump_dir: None,
    }
    .run(&images, None)?;
    let mask = interior_mask(128, 128, 8);
    let err: Vec<f64> = out
        .result
        .disparity
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(d, _)| (d - 8.0).abs())
        .collect();
    println!("median |disparity - 8| = {:.4}", percentile(&err, 0.5));
    println!("unknowns at the finest level: {}", out.report.levels.last().unwrap().unknowns);
    Ok(())
}
