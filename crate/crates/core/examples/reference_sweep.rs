//! Trains FT and FT+routing on the reference synthetic task for a few seeds
//! and prints the headline metrics side by side.
//!
//! `cargo run --release --example reference_sweep -- 0 1 2`

use moir::config::{RunConfig, TaskConfig};
use moir::experiments::{evaluate, robustness_eval, train, TrainConfig};
use moir::synth::generate;

fn main() -> moir::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2, 3, 4] } else { seeds };
    println!("seed,arm,acc,rank_delta_A,rank_delta_B,mdi,aei,unchanged_dep,unchanged_irr,final_loss");
    for seed in seeds {
        let cfg = RunConfig::new(seed, TaskConfig::default());
        let data = generate(&cfg.task_spec())?;
        for moir_enabled in [false, true] {
            let tc = TrainConfig { moir_enabled, ..cfg.train.clone() };
            let out = train(&tc, &cfg.decoder, &data.train, cfg.task.classes)?;
            let m = evaluate(&out.model, &data.test)?;
            let r = robustness_eval(&out.model, &data.test, cfg.robustness_seed())?;
            println!(
                "{seed},{},{:.4},{:.4},{:.4},{:.3},{:.3},{:.4},{:.4},{:.4}",
                if moir_enabled { "moir" } else { "ft" },
                m.accuracy,
                m.rank_delta_a,
                m.rank_delta_b,
                m.mdi,
                m.aei,
                r.dependent,
                r.irrelevant,
                out.loss_history.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
