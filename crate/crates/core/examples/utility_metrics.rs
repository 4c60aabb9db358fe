//! Fréchet distance and diversity on raw feature clouds: the distance grows
//! with added noise, diversity spans 1 (one class) to C (confident, uniform).
//!
//!     cargo run --release --example utility_metrics

use diffcore::Tensor;
use manifold_privacy::eval::{diversity_from_probabilities, frechet_distance};
use manifold_privacy::rng::{normals, stream, Stream};

fn main() -> manifold_privacy::Result<()> {
    let mut rng = stream(0, Stream::Init, 0);
    let base = Tensor::new(vec![500, 6], normals(&mut rng, 3000))?;
    for noise in [0.0, 0.1, 0.5, 1.5] {
        let shifted: Vec<f64> = base.data().iter().zip(normals(&mut rng, 3000)).map(|(x, e)| x + noise * e).collect();
        let fd = frechet_distance(&base, &Tensor::new(vec![500, 6], shifted)?)?;
        println!("noise {noise:.1}: frechet {fd:.4}");
    }
    let one_class = Tensor::new(vec![4, 4], [1.0, 0.0, 0.0, 0.0].repeat(4))?;
    let one_hot = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect())?;
    println!(
        "diversity: one class {:.3}, one per class {:.3}",
        diversity_from_probabilities(&one_class)?,
        diversity_from_probabilities(&one_hot)?
    );
    Ok(())
}
