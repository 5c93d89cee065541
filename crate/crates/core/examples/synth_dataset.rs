//! Generates a small synthetic periocular dataset and summarizes it.
//!
//! `cargo run --release --example synth_dataset [out_dir]`

use std::collections::BTreeMap;

use capsforge::data::{synth_dataset, Preset, SynthSpec};

fn main() -> capsforge::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("capsforge-synth"));
    let spec = SynthSpec {
        subjects: 4,
        frames: 10,
        ..SynthSpec::preset(Preset::Overlapping, 7)
    };
    let manifest = synth_dataset(&spec, &out)?;
    println!("{} images in {}", manifest.len(), out.display());

    let mut per_session: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in &manifest.records {
        let e = per_session
            .entry(format!("{} ({} min, {})", r.session, r.minutes, r.label))
            .or_default();
        e.0 += 1;
        e.1 += r.truth().map_or(0.0, |t| t.ratio());
    }
    for (session, (n, total)) in per_session {
        println!(
            "{session:<28} {n:>4} images  mean pupil/iris {:.3}",
            total / n as f64
        );
    }
    Ok(())
}
