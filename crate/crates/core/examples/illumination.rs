//! Right views brightened by 0.1: the check residual d0 before and after
//! the illumination maps take it up.

use halfway_sceneflow::energy::EnergyParams;
use halfway_sceneflow::hierarchy::{run_scene_flow, Schedule};
use halfway_sceneflow::synth::SceneSpec;

fn main() -> halfway_sceneflow::Result<()> {
    let mut spec = SceneSpec::constant_disparity(96, 96, 1.0, 9);
    spec.offset = [0.0, 0.1, 0.0, 0.1];
    let scene = spec.window(0)?;
    for illumination in [false, true] {
        let schedule = Schedule {
            levels: 3,
            illumination,
            ..Schedule::default()
        };
        let out = run_scene_flow(&scene.images, None, &EnergyParams::default(), &schedule, None)?;
        let finest = out.report.levels.last().unwrap();
        println!("illumination {illumination}: mean |d0| = {:.4}", finest.mean_abs_checks[0]);
    }
    Ok(())
}
