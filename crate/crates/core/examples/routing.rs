//! Routing-by-agreement on random prediction vectors.
//!
//! `cargo run --release --example routing`

use capsforge::capsule::dynamic_routing;
use capsforge::rng::stream;
use capsforge::tensor::Tensor;
use rand::Rng;

fn main() -> capsforge::Result<()> {
    let (ni, nj, d) = (6, 2, 4);
    let mut rng = stream(0, "routing-demo", 0);
    // inputs 0..3 agree on output 0, the rest are noise
    let mut u = vec![0.0; ni * nj * d];
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..d {
                let shared = if i < 4 && j == 0 {
                    [0.8, -0.4, 0.3, 0.1][k]
                } else {
                    0.0
                };
                u[(i * nj + j) * d + k] = shared + rng.gen_range(-0.3..0.3);
            }
        }
    }
    let predictions = Tensor::new([ni, nj, d], u)?;
    for iterations in 1..=3 {
        let state = dynamic_routing(&predictions, iterations)?;
        println!("iterations = {iterations}");
        for (i, row) in state.couplings.values().chunks(nj).enumerate() {
            println!("  c[{i}] = {row:.3?}");
        }
        for (j, v) in state.outputs.values().chunks(d).enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("  |v{j}| = {norm:.4}");
        }
    }
    Ok(())
}
