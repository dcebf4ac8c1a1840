//! Analytic Jacobian against central differences, plus the negative control.

use halfway_sceneflow::gradcheck::{run, GradCheckOptions};

fn main() -> halfway_sceneflow::Result<()> {
    for seed in 1..=3 {
        let opts = GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        };
        let r = run(&opts, false)?;
        println!("seed {seed}: max relative column error {:.2e}", r.max_rel_error);
    }
    let bad = run(&GradCheckOptions::default(), true)?;
    println!(
        "wrong warp sign: error {:.2e} at unknown {} residual {}",
        bad.max_rel_error, bad.worst_unknown, bad.worst_residual
    );
    Ok(())
}
