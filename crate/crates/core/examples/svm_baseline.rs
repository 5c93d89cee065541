//! RBF-kernel SVM on subsampled raw pixels: 5-fold grid search on 60 % of
//! the data, refit, and evaluation on the held-out 40 %.
//!
//! `cargo run --release --example svm_baseline`

use capsforge::baselines::{raw_pixel_stride, svm_protocol, FeatureMatrix};
use capsforge::data::{synth_dataset, Preset, SynthSpec};

fn main() -> capsforge::Result<()> {
    let dir = std::env::temp_dir().join("capsforge-svm");
    let spec = SynthSpec {
        subjects: 4,
        frames: 10,
        ..SynthSpec::preset(Preset::Overlapping, 4)
    };
    let manifest = synth_dataset(&spec, &dir)?;
    let images = manifest.load_images()?;
    let stride = raw_pixel_stride(images.len(), false);
    let features = FeatureMatrix::from_images(&images, stride)?;
    println!(
        "{} samples x {} features (stride {stride})",
        features.rows(),
        features.cols()
    );

    let grid: Vec<(f64, f64)> = [1.0, 10.0, 100.0]
        .into_iter()
        .flat_map(|c| [1e-3, 1e-2].map(|g| (c, g)))
        .collect();
    let result = svm_protocol(&features, &manifest.labels(), 5, &grid, 4)?;
    for row in &result.cv.table {
        println!("  {row}");
    }
    println!("selected {}", result.cv.best);
    println!("held-out: {}", result.test_metrics);
    Ok(())
}
