//! Three frames of constant velocity: the second window starts from the
//! propagated first solution.

use halfway_sceneflow::domain::Vec2;
use halfway_sceneflow::energy::{EnergyParams, Preset};
use halfway_sceneflow::hierarchy::{run_scene_flow, Schedule};
use halfway_sceneflow::synth::SceneSpec;

fn main() -> halfway_sceneflow::Result<()> {
    let spec = SceneSpec::moving_plane(96, 96, 1.0, Vec2::new(1.0, 0.0), 5);
    let schedule = Schedule {
        levels: 3,
        ..Schedule::default()
    };
    let params = EnergyParams::preset(Preset::Facial);
    let first = spec.window(0)?;
    let a = run_scene_flow(&first.images, Some(&first.rig), &params, &schedule, None)?;
    let second = spec.window(1)?;
    let cold = run_scene_flow(&second.images, Some(&second.rig), &params, &schedule, None)?;
    let warm = run_scene_flow(&second.images, Some(&second.rig), &params, &schedule, Some(&a.state))?;
    println!("window 1 initial energy: zero init {:.2}, propagated {:.2}", cold.report.initial_energy, warm.report.initial_energy);
    println!("window 1 final energy:   zero init {:.2}, propagated {:.2}", cold.report.final_energy, warm.report.final_energy);
    Ok(())
}
