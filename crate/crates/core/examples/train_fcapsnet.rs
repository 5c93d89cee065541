//! Trains the desk-scale fused capsule network on a subject-disjoint split
//! of the separable synthetic preset and evaluates it.
//!
//! `cargo run --release --example train_fcapsnet [subjects] [epochs]`
//!
//! The defaults (8 subjects, 10 epochs) finish in a few minutes on one core.

use capsforge::data::{split_subject_disjoint, synth_dataset, Preset, SynthSpec};
use capsforge::models::{
    build_fcapsnet, evaluate, train_validated, Dataset, FCapsNetConfig, Model, Selection,
    TrainParams,
};

fn main() -> capsforge::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let subjects = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed = 1;

    let dir = std::env::temp_dir().join("capsforge-train");
    let spec = SynthSpec {
        subjects,
        ..SynthSpec::preset(Preset::Separable, seed)
    };
    let manifest = synth_dataset(&spec, &dir)?;
    let (train, test) = split_subject_disjoint(&manifest, 0.7, seed)?;
    let (fit, val) = split_subject_disjoint(&train, 0.75, seed + 1)?;
    println!(
        "subjects: fit {:?}, val {:?}, test {:?}",
        fit.subjects(),
        val.subjects(),
        test.subjects()
    );

    let config = FCapsNetConfig {
        seed,
        ..FCapsNetConfig::desk()
    };
    let mut model = Model::Caps(build_fcapsnet(&config)?);
    let params = TrainParams {
        seed,
        learning_rate: 1e-3,
        epochs,
        ..TrainParams::default()
    };
    let run = train_validated(
        &mut model,
        &Dataset::from_manifest(&fit)?,
        &Dataset::from_manifest(&val)?,
        &params,
        Selection { patience: Some(5) },
    )?;
    for e in &run.history {
        println!(
            "epoch {:>2}: loss {:.4} train acc {:.3} val balanced acc {:.3}",
            e.epoch + 1,
            e.loss,
            e.accuracy,
            e.val_balanced_accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("kept epoch {:?}", run.best_epoch.map(|e| e + 1));
    println!(
        "test: {}",
        evaluate(&model, &Dataset::from_manifest(&test)?)?
    );
    model.save(dir.join("model.ckpt"))?;
    println!("checkpoint: {}", dir.join("model.ckpt").display());
    Ok(())
}
