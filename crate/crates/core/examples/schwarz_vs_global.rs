//! One Gauss-Newton step solved by Schwarz sweeps and by global PCG.

use halfway_sceneflow::domain::WarpGrid;
use halfway_sceneflow::energy::EnergyParams;
use halfway_sceneflow::hierarchy::OcclusionMaps;
use halfway_sceneflow::image::SplineImage;
use halfway_sceneflow::solver::{gauss_newton, LevelInput, SolverSettings};
use halfway_sceneflow::synth::SceneSpec;

fn main() -> halfway_sceneflow::Result<()> {
    let scene = SceneSpec::constant_disparity(64, 64, 1.5, 4).window(0)?;
    let images = scene.images.clone().map(|i| SplineImage::new(&i));
    let illumination: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; 64 * 64]);
    let visibility = OcclusionMaps::all_visible(64, 64).check_masks();
    let base = WarpGrid::zeros(64, 64, 2);
    let params = EnergyParams::default();
    let input = LevelInput {
        images: &images,
        illumination: &illumination,
        visibility: &visibility,
        base: &base,
        params: &params,
        fundamental: None,
        active: [true; 3],
        level: 0,
    };
    let schwarz = SolverSettings {
        gn_iters: 1,
        pcg_iters: 5,
        patch_iters: 5,
        ..SolverSettings::default()
    };
    let global = SolverSettings {
        gn_iters: 1,
        pcg_iters: 25,
        patch_iters: 1,
        subdomain_px: 0,
        ..SolverSettings::default()
    };
    for (name, s) in [("schwarz", schwarz), ("global", global)] {
        let sol = gauss_newton(&input, base.clone(), &s)?;
        let it = &sol.iterations[0];
        println!("{name}: energy {:.3} -> {:.3}", it.energy_before, it.energy_after);
    }
    Ok(())
}
