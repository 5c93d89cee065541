//! Trains a narrow Small-VGG baseline on synthetic data.
//!
//! `cargo run --release --example smallvgg`

use capsforge::data::{split_subject_disjoint, synth_dataset, Preset, SynthSpec};
use capsforge::models::{evaluate, train, Dataset, Model, SmallVgg, SmallVggConfig, TrainParams};

fn main() -> capsforge::Result<()> {
    let dir = std::env::temp_dir().join("capsforge-vgg");
    let spec = SynthSpec {
        subjects: 6,
        frames: 10,
        ..SynthSpec::preset(Preset::Separable, 2)
    };
    let manifest = synth_dataset(&spec, &dir)?;
    let (train_set, test_set) = split_subject_disjoint(&manifest, 0.7, 2)?;

    let config = SmallVggConfig {
        seed: 2,
        ..SmallVggConfig::small()
    };
    let mut model = Model::SmallVgg(SmallVgg::new(&config)?);
    let params = TrainParams {
        seed: 2,
        learning_rate: 1e-3,
        epochs: 8,
        batch_size: config.batch_size,
        ..TrainParams::default()
    };
    let run = train(&mut model, &Dataset::from_manifest(&train_set)?, &params)?;
    for e in &run.history {
        println!(
            "epoch {:>2}: loss {:.4} train acc {:.3}",
            e.epoch + 1,
            e.loss,
            e.accuracy
        );
    }
    println!(
        "test: {}",
        evaluate(&model, &Dataset::from_manifest(&test_set)?)?
    );
    Ok(())
}
