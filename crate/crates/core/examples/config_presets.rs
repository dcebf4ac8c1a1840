//! Loading a run configuration on top of a preset.

use halfway_sceneflow::config::Config;

fn main() -> halfway_sceneflow::Result<()> {
    let cfg = Config::parse("preset = stereo-hq\nw_epi = 0.25\nlevels = 4\ngn_iters = 3,3,5\n")?;
    println!("w_epi = {}, m_m = {}", cfg.params.w_epi, cfg.params.m_m);
    println!("GN iterations per level: {:?}", (0..4).map(|l| cfg.schedule.gn_for(l)).collect::<Vec<_>>());
    print!("{}", cfg.to_config_string());
    Ok(())
}
