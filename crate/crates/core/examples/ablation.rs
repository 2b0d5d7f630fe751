//! Runs the six ablation configurations plus the oracle on the default
//! synthetic benchmark and prints final target mAP per seed.
//!
//! cargo run --release --example ablation -- [seeds] [epochs]

use std::time::Instant;

use instmix::clipstore::{DomainTag, Origin};
use instmix::synthgen::{gen_benchmark, BenchmarkConfig};
use instmix::trainer::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(Ok(3), |s| s.parse())?;
    let epochs: Option<usize> = args.get(2).map(|s| s.parse()).transpose()?;
    let rows = [
        ("source-only", false, false, false),
        ("pLabel", false, true, false),
        ("iMix", true, false, false),
        ("iMix+resize", true, false, true),
        ("iMix+pLabel", true, true, false),
        ("all", true, true, true),
    ];
    for seed in 0..seeds {
        let bench = gen_benchmark(&BenchmarkConfig { seed, ..BenchmarkConfig::default() })?;
        let base = TrainConfig { seed, epochs: epochs.unwrap_or(TrainConfig::default().epochs), ..TrainConfig::default() };
        for (name, mix, pseudo, resize) in rows {
            let t0 = Instant::now();
            let cfg = TrainConfig { enable_mix: mix, enable_pseudo: pseudo, enable_resize: resize, ..base.clone() };
            let out = train(&cfg, &bench.source, None, &bench.target_train, Some(&bench.target_val))?;
            let last = out.epochs.last().unwrap();
            println!(
                "seed {seed} {name:12} mAP {:.4} pl-acc {:.4} lambda {:.3} ({:.1}s)",
                last.target_map,
                out.pseudo_confusion.accuracy(),
                last.mean_lambda,
                t0.elapsed().as_secs_f64()
            );
        }
        let oracle_src = bench.target_train.retagged(DomainTag::Source, Origin::SourcePrimary);
        let out = train(&base.clone().source_only(), &oracle_src, None, &bench.target_train, Some(&bench.target_val))?;
        println!("seed {seed} {:12} mAP {:.4}", "oracle", out.epochs.last().unwrap().target_map);
    }
    Ok(())
}
