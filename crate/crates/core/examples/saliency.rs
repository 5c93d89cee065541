//! Grad-CAM and Grad-CAM++ maps for a briefly trained fused capsule
//! network, with PPM overlays and the heat inside the iris annulus.
//!
//! `cargo run --release --example saliency [out_dir]`

use std::path::PathBuf;

use capsforge::data::{split_subject_disjoint, synth_dataset, Label, Preset, SynthSpec};
use capsforge::explain::{annulus_mass, average_heatmap, conv_layers, gradcam, overlay, CamMethod};
use capsforge::models::{build_fcapsnet, train, Dataset, FCapsNetConfig, Model, TrainParams};

fn main() -> capsforge::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("capsforge-saliency"));
    let spec = SynthSpec {
        subjects: 6,
        frames: 10,
        ..SynthSpec::preset(Preset::Separable, 3)
    };
    let manifest = synth_dataset(&spec, out.join("data"))?;
    let (train_set, test_set) = split_subject_disjoint(&manifest, 0.7, 3)?;
    let config = FCapsNetConfig {
        seed: 3,
        ..FCapsNetConfig::desk()
    };
    let mut model = Model::Caps(build_fcapsnet(&config)?);
    let params = TrainParams {
        seed: 3,
        learning_rate: 1e-3,
        epochs: 5,
        ..TrainParams::default()
    };
    train(&mut model, &Dataset::from_manifest(&train_set)?, &params)?;

    let alcohol = test_set.filter(|r| r.label == Label::Alcohol);
    let record = &alcohol.records[0];
    let image = alcohol.load_image(record)?;
    let truth = record.truth().expect("synthetic truth");
    for layer in conv_layers(&model) {
        for method in [CamMethod::GradCam, CamMethod::GradCamPlusPlus] {
            let map = gradcam(&model, &image, layer, Label::Alcohol, method)?;
            let (inside, outside) =
                annulus_mass(&map, truth.cx, truth.cy, truth.pupil_r, truth.iris_r);
            let name = format!("{layer}_{}.ppm", method.to_string().replace('+', "p"));
            overlay(&map, &image)?.save_ppm(out.join(&name))?;
            println!(
                "{name:<24} annulus {inside:.3} outside {outside:.3} total variation {:.1}",
                map.total_variation()
            );
        }
    }
    let images = alcohol.load_images()?;
    let mean = average_heatmap(
        &model,
        &images,
        "fused",
        Label::Alcohol,
        CamMethod::GradCamPlusPlus,
    )?;
    mean.save_csv(out.join("average.csv"))?;
    println!(
        "average over {} alcohol images: total variation {:.1}",
        images.len(),
        mean.total_variation()
    );
    println!("wrote {}", out.display());
    Ok(())
}
