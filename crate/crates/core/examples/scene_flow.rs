//! Full scene flow on a moving plane, scored against the generator.

use halfway_sceneflow::domain::{Flow, Vec2};
use halfway_sceneflow::energy::{EnergyParams, Preset};
use halfway_sceneflow::hierarchy::{run_scene_flow, Schedule};
use halfway_sceneflow::synth::{endpoint_errors, interior_mask, percentile, SceneSpec};

fn main() -> halfway_sceneflow::Result<()> {
    let spec = SceneSpec::moving_plane(128, 128, 1.5, Vec2::new(2.0, 1.0), 11);
    let scene = spec.window(0)?;
    let schedule = Schedule {
        levels: 4,
        ..Schedule::default()
    };
    let params = EnergyParams::preset(Preset::Facial);
    let out = run_scene_flow(&scene.images, Some(&scene.rig), &params, &schedule, None)?;
    for level in &out.report.levels {
        println!(
            "level {} ({}x{}): energy {:.2} -> {:.2} in {:.0} ms",
            level.level, level.width, level.height, level.energy_initial, level.energy_final, level.elapsed_ms
        );
    }
    let mask = interior_mask(128, 128, 12);
    for flow in Flow::ALL {
        let epe = endpoint_errors(out.result.flow(flow), scene.flow(flow), Some(&mask));
        println!("{}: median EPE {:.4}", flow.name(), percentile(&epe, 0.5));
    }
    Ok(())
}
