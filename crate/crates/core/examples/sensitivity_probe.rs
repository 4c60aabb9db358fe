//! Does loss move more under small latent steps where curvature is high?
//! Probes a grid on the paraboloid fixture at three step sizes.
//!
//!     cargo run --release --example sensitivity_probe

use diffcore::Tensor;
use manifold_privacy::data::synth::{fixture_decoder, ManifoldKind};
use manifold_privacy::eval::loss_sensitivity_probe;
use manifold_privacy::geometry::{curvature_fd, Decoder, FdScheme};

fn main() -> manifold_privacy::Result<()> {
    let dec = fixture_decoder(ManifoldKind::Paraboloid);
    let grid: Vec<Vec<f64>> = (0..11)
        .flat_map(|i| (0..11).map(move |j| vec![-1.0 + 0.2 * i as f64, -1.0 + 0.2 * j as f64]))
        .collect();
    let latents = Tensor::from_rows(&grid)?;
    let anchor = dec.mean(&[0.0, 0.0])?;
    let loss = |x: &[f64]| Ok(0.5 * x.iter().zip(&anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    let curvature = |z: &[f64]| curvature_fd(&dec, z, 1e-3, FdScheme::OneSided);
    for eps in [1e-3, 2e-3, 4e-3] {
        let r = loss_sensitivity_probe(&dec, curvature, loss, &latents, eps, 16, 0)?;
        let mean = r.points.iter().map(|p| p.mean_delta_loss).sum::<f64>() / r.points.len() as f64;
        println!("eps {eps:.0e}: mean |dL| {mean:.3e}, spearman {:?}", r.rank_correlation);
    }
    Ok(())
}
