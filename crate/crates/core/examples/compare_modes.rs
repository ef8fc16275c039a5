//! Trains baseline-frozen, lora and molre on one synthetic dataset over
//! several seeds and prints mean test AUC per mode.
//!
//! `cargo run --release --example compare_modes -- [key=value ...]`

use molre::experiment::{mean_test_auc, Comparison};
use molre::{Mode, RunConfig};

fn main() -> molre::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let mut base = RunConfig::from_toml_with_overrides(
        "slices = 16\nheight = 32\nwidth = 32\nprevalence_min = 0.02\n",
        &overrides,
    )?;
    base.augment = false;
    let cmp = Comparison {
        base,
        n_train: 2000,
        n_val: 400,
        n_test: 400,
        modes: vec![Mode::BaselineFrozen, Mode::Lora, Mode::Molre],
        seeds: (0..5).collect(),
    };
    let t0 = std::time::Instant::now();
    let results = cmp.run(|r| {
        println!(
            "{:<16} seed {} epochs {:>3} best {:>3} val {:.4} test {:.4}  [{:.0}s]",
            r.mode.to_string(),
            r.seed,
            r.epochs,
            r.best_epoch,
            r.val_auc,
            r.test_auc,
            t0.elapsed().as_secs_f64()
        )
    })?;
    for (m, auc) in mean_test_auc(&results) {
        println!("{m:<16} mean test AUC {auc:.4}");
    }
    Ok(())
}
