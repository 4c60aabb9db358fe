//! Overfit a small classifier on an imbalanced toy set and run the
//! loss-threshold membership attack against it.
//!
//!     cargo run --release --example membership_attack

use manifold_privacy::data::imbalance::imbalance_downsample;
use manifold_privacy::data::synth::{toy_images, ToySpec};
use manifold_privacy::data::Split;
use manifold_privacy::eval::{curvature_vulnerability_report, mia_attack, train_downstream, Arch, ClassifierConfig, MiaConfig};

fn main() -> manifold_privacy::Result<()> {
    let spec = ToySpec { per_class: [600, 600], ..ToySpec::default() };
    let train = imbalance_downsample(&toy_images(&spec, Split::Train, 0)?.0, &[1], 0.1, 0)?;
    let test = imbalance_downsample(&toy_images(&spec, Split::Test, 0)?.0, &[1], 0.1, 1)?;
    let cfg = ClassifierConfig { arch: Arch::Mlp, hidden: 128, epochs: 60, lr: 3e-3, ..ClassifierConfig::default() };
    let (clf, losses) = train_downstream(&train, &cfg)?;
    println!("train loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
    println!("train accuracy {:.4}, test accuracy {:.4}", clf.accuracy(&train)?, clf.accuracy(&test)?);
    let report = mia_attack(&clf, &train, &test, &MiaConfig::default())?;
    println!("attack accuracy {:.4} on {} balanced pairs", report.accuracy, report.balanced);
    let v = curvature_vulnerability_report(&train.images, &report.member_flags, 20, 2)?;
    println!(
        "curvature proxy: vulnerable {:?}, invulnerable {:?}, correlation {:?}",
        v.mean_vulnerable, v.mean_invulnerable, v.correlation
    );
    Ok(())
}
