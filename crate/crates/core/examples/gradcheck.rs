//! Finite-difference checks of the autodiff engine: one elementwise op and
//! the whole tiny fused capsule network.
//!
//! `cargo run --release --example gradcheck`

use capsforge::models::{gradient_check_tiny, Arch, FCapsNetConfig};
use capsforge::tensor::{grad_check, GradCheckOptions, Tensor};

fn main() -> capsforge::Result<()> {
    let x = Tensor::new([2, 3], vec![0.3, -0.7, 1.2, 0.05, -0.2, 0.9])?;
    let err = grad_check(
        |g, v| {
            let s = g.squash(v[0])?;
            let n = g.norms(s)?;
            Ok(g.sum(n))
        },
        &[x],
        GradCheckOptions::exhaustive(1e-6),
    )?;
    println!("squash + norms: max relative error {err:.2e}");

    let params = FCapsNetConfig::tiny().parameter_count(Arch::Fused);
    let err = gradient_check_tiny(0)?;
    println!("tiny fcapsnet ({params} parameters, 2 images): max relative error {err:.2e}");
    Ok(())
}
