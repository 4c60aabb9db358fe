//! Geodesic between two latents on the paraboloid fixture, with the
//! finite-difference curvature along the path and the perturbation point
//! the obfuscator would pick from it.
//!
//!     cargo run --release --example geodesic

use manifold_privacy::data::synth::{fixture_decoder, ManifoldKind};
use manifold_privacy::geometry::{curvature_fd, geodesic, geodesic_length, FdScheme, GeodesicOptions};
use manifold_privacy::obfuscator::prefix_argmin;

fn main() -> manifold_privacy::Result<()> {
    let dec = fixture_decoder(ManifoldKind::Paraboloid);
    let (a, b) = (vec![-1.0, -0.5], vec![1.0, 0.5]);
    let path = geodesic(&dec, &a, &b, &GeodesicOptions::default())?;
    println!(
        "energy {:.5} (straight {:.5}) after {} iterations, length {:.5}",
        path.energy,
        path.initial_energy,
        path.iterations,
        geodesic_length(&dec, &path.samples)?
    );
    let mut curvature = Vec::new();
    for i in 0..path.samples.rows() {
        let z = path.samples.row(i);
        let k = curvature_fd(&dec, z, 1e-3, FdScheme::OneSided)?;
        println!("{i:>2}  z = ({:+.3}, {:+.3})  curvature {k:.4e}", z[0], z[1]);
        curvature.push(k);
    }
    let (i_max, i_star) = prefix_argmin(&curvature)?;
    println!("curvature peaks at sample {i_max}; the flattest point before it is {i_star}");
    Ok(())
}
