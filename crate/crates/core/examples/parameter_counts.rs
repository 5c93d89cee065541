//! Parameter counts of the fused and plain capsule networks across the
//! capsule-count grid.
//!
//! `cargo run --release --example parameter_counts`

use capsforge::capsule::CAPSULE_COUNTS;
use capsforge::models::{Arch, FCapsNetConfig};

fn main() {
    println!(
        "{:>8} {:>14} {:>14} {:>7}",
        "capsules", "capsnet", "fcapsnet", "ratio"
    );
    for n in CAPSULE_COUNTS {
        let config = FCapsNetConfig {
            num_capsules: n,
            ..FCapsNetConfig::default()
        };
        let plain = config.parameter_count(Arch::Plain);
        let fused = config.parameter_count(Arch::Fused);
        println!(
            "{n:>8} {plain:>14} {fused:>14} {:>7.3}",
            fused as f64 / plain as f64
        );
    }
    let desk = FCapsNetConfig::desk();
    println!(
        "desk preset: capsnet {} / fcapsnet {}",
        desk.parameter_count(Arch::Plain),
        desk.parameter_count(Arch::Fused)
    );
}
