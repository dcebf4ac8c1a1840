//! Renders a two-layer scene and reports its ground truth.

use halfway_sceneflow::domain::Flow;
use halfway_sceneflow::synth::SceneSpec;

fn main() -> halfway_sceneflow::Result<()> {
    let scene = SceneSpec::two_layer(128, 96, 1.0, 3.0, 40.0, 7).window(0)?;
    let n = scene.width * scene.height;
    for v in 0..4 {
        let hidden = scene.visible.iter().filter(|vis| !vis[v]).count();
        println!("view {v}: {hidden} of {n} halfway pixels occluded");
    }
    let fg = scene.layer.iter().filter(|l| **l == 1).count();
    println!("foreground pixels: {fg}");
    let s = scene.flow(Flow::Stereo);
    println!("s at corner {:?}, at center {:?}", s[0], s[n / 2 + scene.width / 2]);
    Ok(())
}
