//! Z-buffered occlusion maps of the ground-truth flow of a two-layer scene.

use halfway_sceneflow::domain::WarpGrid;
use halfway_sceneflow::hierarchy::compute_occlusion_maps;
use halfway_sceneflow::synth::SceneSpec;

fn main() -> halfway_sceneflow::Result<()> {
    let scene = SceneSpec::two_layer(96, 96, 1.0, 4.0, 40.0, 2).window(0)?;
    let mut grid = WarpGrid::zeros(96, 96, 1);
    for i in 0..grid.node_count() {
        grid.set_node(i, scene.pixel_flow(i));
    }
    let maps = compute_occlusion_maps(&grid);
    for v in 0..4 {
        let truth = scene.visible.iter().filter(|vis| !vis[v]).count();
        println!("view {v}: {} occluded, ground truth {truth}", maps.occluded_count(v));
    }
    Ok(())
}
