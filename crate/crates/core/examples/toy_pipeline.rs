//! Train, publish and attack on the toy config, printing timings.
//!
//!     cargo run --release --example toy_pipeline -- configs/toy.toml [seed]

use std::time::Instant;

use manifold_privacy::config::RunConfig;
use manifold_privacy::pipeline;

fn main() -> manifold_privacy::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "configs/toy.toml".into());
    let mut cfg = RunConfig::load(path.as_ref())?;
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed is an integer");
        cfg.propagate_seed();
    }
    let out = tempfile_dir(&cfg);
    let t0 = Instant::now();
    let (train, test) = pipeline::load_splits(&cfg)?;
    println!("train {:?} test {:?}", train.class_counts(), test.class_counts());
    let trainer = pipeline::train(&cfg, &train, &out, false)?;
    for r in &trainer.log.records {
        println!("{:?} {} {:.2}s mu={:?} sigma={:?} curv={:?}", r.phase, r.epoch, r.seconds, r.loss_mu, r.loss_sigma, r.loss_curv);
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    let published = pipeline::publish_with(&trainer, &train)?;
    println!("published in {:.1}s", t0.elapsed().as_secs_f64());
    let s = pipeline::attack(&cfg, &train, &test, &published.dataset)?;
    println!(
        "attack original {:.4} -> published {:.4}; accuracy {:.4} -> {:.4}",
        s.original.accuracy, s.published.accuracy, s.original_test_accuracy, s.published_test_accuracy
    );
    println!(
        "proxy vulnerable {:?} invulnerable {:?}",
        s.vulnerability.mean_vulnerable, s.vulnerability.mean_invulnerable
    );
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn tempfile_dir(cfg: &RunConfig) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("mprs-toy-{}", cfg.seed))
}
