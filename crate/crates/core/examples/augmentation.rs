//! Geometric augmentation of one synthetic frame, with the ground-truth
//! geometry carried through the transform.
//!
//! `cargo run --release --example augmentation [out_dir]`

use std::path::PathBuf;

use capsforge::data::{synth_image, AugmentDraw, AugmentSpec, Preset, SubjectParams, SynthSpec};
use capsforge::image::{IMAGE_HEIGHT, IMAGE_WIDTH};
use capsforge::rng::stream;

fn main() -> capsforge::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("capsforge-augment"));
    let spec = SynthSpec::preset(Preset::Separable, 5);
    let subject = SubjectParams::sample(5, 0);
    let (image, truth) = synth_image(
        &subject,
        &spec.sessions[2],
        spec.noise_std,
        &mut stream(5, "data", 0),
    )?;
    image.save_pgm(out.join("original.pgm"))?;

    let aug = AugmentSpec::default();
    for k in 0..aug.multiplier {
        let draw = AugmentDraw::sample(&aug, &mut stream(5, "augment", k as u64));
        let moved = draw.transform_truth(&truth, IMAGE_HEIGHT, IMAGE_WIDTH);
        draw.apply(&image)
            .save_pgm(out.join(format!("aug_{k}.pgm")))?;
        println!(
            "aug_{k}: rotate {:+.1} deg, shift ({:+.2}, {:+.2}), zoom {:.3} -> iris center ({:.1}, {:.1}) r {:.1}",
            draw.rotation_degrees, draw.shift_x, draw.shift_y, draw.zoom, moved.cx, moved.cy, moved.iris_r
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
