//! Pupil/iris ratio analysis: per-session histograms, the threshold
//! classifier and radius estimation from pixels.
//!
//! `cargo run --release --example ratio_analysis`

use capsforge::analysis::{
    distribution_overlap, estimate_radii, ratios_from_truth, session_histograms,
    threshold_classifier, RatioThresholds,
};
use capsforge::data::{synth_dataset, Preset, SynthSpec};

fn main() -> capsforge::Result<()> {
    let dir = std::env::temp_dir().join("capsforge-ratios");
    let spec = SynthSpec {
        subjects: 6,
        ..SynthSpec::preset(Preset::Overlapping, 3)
    };
    let manifest = synth_dataset(&spec, &dir)?;
    let ratios = ratios_from_truth(&manifest)?;

    let hists = session_histograms(&ratios, 20)?;
    for h in &hists {
        println!(
            "{}: n={} mean {:.3} std {:.3}",
            h.session,
            h.total(),
            h.mean,
            h.std
        );
    }
    println!(
        "overlap S0 vs S2: {:.2}",
        distribution_overlap(&hists[0], &hists[2])?
    );

    let thresholds = RatioThresholds::from_sober(&ratios)?;
    let result = threshold_classifier(&ratios, &thresholds)?;
    println!(
        "sober mean +/- 2 sd (contraction {:.3}, dilation {:.3}): {}",
        thresholds.contraction, thresholds.dilation, result.metrics
    );
    println!(
        "best single cut {:.3}: {}",
        result.best.threshold, result.best.metrics
    );

    let record = &manifest.records[0];
    let truth = record.truth().expect("synthetic truth");
    let est = estimate_radii(&manifest.load_image(record)?)?;
    println!(
        "estimated radii pupil {:.2} iris {:.2} (truth {:.2} / {:.2})",
        est.pupil_r, est.iris_r, truth.pupil_r, truth.iris_r
    );
    Ok(())
}
