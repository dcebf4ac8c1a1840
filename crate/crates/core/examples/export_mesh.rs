//! Writes flow fields, disparity and a triangulated mesh.

use halfway_sceneflow::domain::Flow;
use halfway_sceneflow::energy::EnergyParams;
use halfway_sceneflow::geometry::{write_flo, write_obj, write_pfm};
use halfway_sceneflow::hierarchy::{run_scene_flow, Schedule};
use halfway_sceneflow::synth::SceneSpec;

fn main() -> halfway_sceneflow::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "mesh-out".into());
    std::fs::create_dir_all(&dir).expect("output directory");
    let dir = std::path::Path::new(&dir);
    let scene = SceneSpec::slanted(96, 96, 2.0, [0.01, 0.0].into(), 4).window(0)?;
    let schedule = Schedule {
        levels: 3,
        ..Schedule::default()
    };
    let out = run_scene_flow(&scene.images, Some(&scene.rig), &EnergyParams::default(), &schedule, None)?;
    let r = &out.result;
    for flow in Flow::ALL {
        write_flo(dir.join(format!("{}.flo", flow.name())), r.width, r.height, r.flow(flow))?;
    }
    write_pfm(dir.join("disparity.pfm"), r.width, r.height, &r.disparity)?;
    let (v, f) = write_obj(dir.join("mesh.obj"), r)?;
    println!("{}: {v} vertices, {f} triangles", dir.join("mesh.obj").display());
    Ok(())
}
