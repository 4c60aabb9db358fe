//! Pixelate, blur and k-anonymize a toy set and report how far each moves
//! the images.
//!
//!     cargo run --release --example baselines

use manifold_privacy::baselines::{run_baseline, BaselineConfig, Method};
use manifold_privacy::data::synth::{toy_images, ToySpec};
use manifold_privacy::data::Split;

fn main() -> manifold_privacy::Result<()> {
    let spec = ToySpec { per_class: [200, 200], ..ToySpec::default() };
    let (ds, _) = toy_images(&spec, Split::Train, 0)?;
    let cfg = BaselineConfig { clusters: 40, ..BaselineConfig::default() };
    for method in [Method::Pixelate, Method::Blur, Method::KAnonymize] {
        let out = run_baseline(method, &ds, &cfg)?;
        let kept: Vec<usize> = out.records.iter().map(|r| r.source.expect("baselines record their source")).collect();
        let mse = kept
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let d: f64 = out.dataset.image(i).iter().zip(ds.image(s)).map(|(x, y)| (x - y) * (x - y)).sum();
                d / ds.pixels() as f64
            })
            .sum::<f64>()
            / kept.len().max(1) as f64;
        println!("{method:?}: kept {}/{} images, mean squared change {mse:.5}", kept.len(), ds.len());
    }
    Ok(())
}
