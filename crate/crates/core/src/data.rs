//! Synthetic periocular images, dataset manifests, subject-disjoint splits
//! and geometric augmentation.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{write_atomic, Image, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::rng::{stream, StreamRng};
use crate::{Error, Result};

pub const SESSION_COUNT: usize = 5;

/// Capture session; the number is the quarter-hour after alcohol intake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Session {
    S0,
    S1,
    S2,
    S3,
    S4,
}

impl Session {
    pub const ALL: [Session; SESSION_COUNT] = [
        Session::S0,
        Session::S1,
        Session::S2,
        Session::S3,
        Session::S4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn minutes(self) -> u32 {
        15 * self as u32
    }

    /// Session 0 is captured sober; every later session is under alcohol.
    pub fn label(self) -> Label {
        if self == Session::S0 {
            Label::NoAlcohol
        } else {
            Label::Alcohol
        }
    }
}

impl fmt::Display for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.index())
    }
}

impl FromStr for Session {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Session::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown session `{s}`")))
    }
}

/// Class label. Alcohol is class 0 and the positive class for metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Alcohol,
    NoAlcohol,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Alcohol, Label::NoAlcohol];

    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_class(index: usize) -> Result<Label> {
        Label::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("class index {index} out of range")))
    }

    pub fn one_hot(self) -> [f64; 2] {
        let mut t = [0.0; 2];
        t[self.class_index()] = 1.0;
        t
    }

    pub fn is_positive(self) -> bool {
        self == Label::Alcohol
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Alcohol => "alcohol",
            Label::NoAlcohol => "no_alcohol",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alcohol" => Ok(Label::Alcohol),
            "no_alcohol" => Ok(Label::NoAlcohol),
            _ => Err(Error::Config(format!(
                "unknown label `{s}` (alcohol|no_alcohol)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    L,
    R,
}

/// Ground-truth eye geometry in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truth {
    pub iris_r: f64,
    pub pupil_r: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Truth {
    /// Pupil-to-iris radius ratio in `(0,1)`.
    pub fn ratio(&self) -> f64 {
        self.pupil_r / self.iris_r
    }
}

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub session: Session,
    pub minutes: u32,
    pub eye: Eye,
    pub label: Label,
    pub path: String,
    pub iris_r: Option<f64>,
    pub pupil_r: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
}

impl ManifestRecord {
    pub fn truth(&self) -> Option<Truth> {
        Some(Truth {
            iris_r: self.iris_r?,
            pupil_r: self.pupil_r?,
            cx: self.cx?,
            cy: self.cy?,
        })
    }

    pub fn set_truth(&mut self, truth: Option<Truth>) {
        self.iris_r = truth.map(|t| t.iris_r);
        self.pupil_r = truth.map(|t| t.pupil_r);
        self.cx = truth.map(|t| t.cx);
        self.cy = truth.map(|t| t.cy);
    }

    pub fn validate(&self) -> Result<()> {
        if self.label != self.session.label() {
            return Err(Error::Validation(format!(
                "{}: label {} inconsistent with session {}",
                self.path, self.label, self.session
            )));
        }
        if self.minutes != self.session.minutes() {
            return Err(Error::Validation(format!(
                "{}: {} minutes inconsistent with session {}",
                self.path, self.minutes, self.session
            )));
        }
        if let (Some(i), Some(p)) = (self.iris_r, self.pupil_r) {
            if !(p > 0.0 && p < i) {
                return Err(Error::Validation(format!(
                    "{}: radii must satisfy 0 < pupil ({p}) < iris ({i})",
                    self.path
                )));
            }
        }
        Ok(())
    }
}

/// Records plus the directory their image paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Manifest {
            root: root.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<Image> {
        Image::load_pgm(self.image_path(record))
    }

    /// Loads every image in record order, in parallel.
    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.records
            .par_iter()
            .map(|r| self.load_image(r))
            .collect()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.subject_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn filter(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Manifest {
        Manifest::new(
            self.root.clone(),
            self.records.iter().filter(|r| keep(r)).cloned().collect(),
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        for r in &records {
            r.validate()?;
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, records })
    }

    /// Writes the CSV, rewriting image paths relative to the new location.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            let mut r = r.clone();
            r.path = relative_path(&self.root.join(&r.path), &dir)?;
            w.serialize(r).map_err(|e| Error::csv(path, e))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io(path, e.into_error()))?;
        write_atomic(path, &bytes)
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    Ok(out)
}

/// `target` expressed relative to directory `base`, using `/` separators.
fn relative_path(target: &Path, base: &Path) -> Result<String> {
    let t = absolute(target)?;
    let b = absolute(base)?;
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut parts: Vec<String> = vec!["..".into(); bc.len() - common];
    parts.extend(
        tc[common..]
            .iter()
            .map(|c| c.as_os_str().to_string_lossy().into_owned()),
    );
    Ok(parts.join("/"))
}

// ---------------------------------------------------------------- generator

/// Ratio distribution and alcohol effects for one session.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionParams {
    pub ratio_mean: f64,
    pub ratio_std: f64,
    /// Horizontal box-blur length in pixels (1 = none).
    pub blur: usize,
    /// Upper bound of the extra upper-eyelid droop, as a fraction of the
    /// iris radius.
    pub droop: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Alcohol and sober ratios barely overlap and alcohol blur is strong.
    Separable,
    /// Per-session ratio distributions overlap heavily.
    Overlapping,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Preset::Separable),
            "overlapping" => Ok(Preset::Overlapping),
            _ => Err(Error::Config(format!(
                "unknown preset `{s}` (separable|overlapping)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Separable => "separable",
            Preset::Overlapping => "overlapping",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub subjects: usize,
    /// Frames per subject and session; the first half are left eyes.
    pub frames: usize,
    pub sessions: [SessionParams; SESSION_COUNT],
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let s = |ratio_mean, ratio_std, blur, droop| SessionParams {
            ratio_mean,
            ratio_std,
            blur,
            droop,
        };
        let sessions = match preset {
            Preset::Separable => [
                s(0.30, 0.02, 1, 0.0),
                s(0.45, 0.02, 9, 0.10),
                s(0.55, 0.02, 9, 0.12),
                s(0.50, 0.02, 9, 0.10),
                s(0.47, 0.02, 9, 0.08),
            ],
            Preset::Overlapping => [
                s(0.40, 0.05, 1, 0.0),
                s(0.42, 0.05, 5, 0.06),
                s(0.45, 0.05, 5, 0.08),
                s(0.43, 0.05, 5, 0.06),
                s(0.42, 0.05, 5, 0.05),
            ],
        };
        SynthSpec {
            subjects: 30,
            frames: 20,
            sessions,
            noise_std: 0.02,
            seed,
        }
    }

    pub fn total_images(&self) -> usize {
        self.subjects * SESSION_COUNT * self.frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.frames == 0 {
            return Err(Error::Config("subjects and frames must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        for (i, p) in self.sessions.iter().enumerate() {
            if !(p.ratio_mean > 0.0 && p.ratio_mean < 1.0) || !(p.ratio_std >= 0.0) {
                return Err(Error::Config(format!(
                    "session S{i}: ratio mean must lie in (0,1)"
                )));
            }
            if p.blur == 0 || !(0.0..=MAX_DROOP).contains(&p.droop) {
                return Err(Error::Config(format!(
                    "session S{i}: blur must be >= 1 and droop within [0, {MAX_DROOP}]"
                )));
            }
        }
        Ok(())
    }
}

const PUPIL_LEVEL: f64 = 0.06;
const SCLERA_LEVEL: f64 = 0.85;
const MAX_DROOP: f64 = 0.12;
const RATIO_RANGE: (f64, f64) = (0.15, 0.75);

/// Per-subject appearance: iris size and position, tones and iris texture.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectParams {
    pub iris_r: f64,
    pub cx: f64,
    pub cy: f64,
    pub iris_level: f64,
    pub skin_level: f64,
    /// `(amplitude, angular frequency, phase)` of the radial iris streaks.
    pub texture: Vec<(f64, f64, f64)>,
}

impl SubjectParams {
    pub fn sample(seed: u64, subject: usize) -> Self {
        let mut rng = stream(seed, "subject", subject as u64);
        let mut texture: Vec<(f64, f64, f64)> = (0..7)
            .map(|_| {
                (
                    rng.gen_range(0.5..1.0),
                    f64::from(rng.gen_range(6u32..40)),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let total: f64 = texture.iter().map(|t| t.0).sum();
        texture.iter_mut().for_each(|t| t.0 *= 0.14 / total);
        SubjectParams {
            iris_r: rng.gen_range(44.0..48.0),
            cx: (IMAGE_WIDTH as f64 - 1.0) / 2.0 + rng.gen_range(-3.0..3.0),
            cy: (IMAGE_HEIGHT as f64 - 1.0) / 2.0 + rng.gen_range(-2.0..2.0),
            iris_level: rng.gen_range(0.36..0.44),
            skin_level: rng.gen_range(0.60..0.68),
            texture,
        }
    }

    fn texture_at(&self, theta: f64) -> f64 {
        self.texture
            .iter()
            .map(|(a, n, p)| a * (n * theta + p).sin())
            .sum()
    }
}

fn coverage(signed_distance: f64) -> f64 {
    (signed_distance + 0.5).clamp(0.0, 1.0)
}

/// Renders one frame for `subject` in a session and returns it with the
/// exact geometry used.
pub fn synth_image(
    subject: &SubjectParams,
    session: &SessionParams,
    noise_std: f64,
    rng: &mut StreamRng,
) -> Result<(Image, Truth)> {
    let ratio = if session.ratio_std > 0.0 {
        Normal::new(session.ratio_mean, session.ratio_std)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng)
    } else {
        session.ratio_mean
    }
    .clamp(RATIO_RANGE.0, RATIO_RANGE.1);
    let cx = subject.cx + rng.gen_range(-2.0..2.0);
    let cy = subject.cy + rng.gen_range(-2.0..2.0);
    let droop = if session.droop > 0.0 {
        rng.gen_range(0.0..session.droop)
    } else {
        0.0
    };
    let ir = subject.iris_r;
    let truth = Truth {
        iris_r: ir,
        pupil_r: ratio * ir,
        cx,
        cy,
    };
    render(subject, &truth, droop, session.blur, noise_std, rng).map(|img| (img, truth))
}

/// Draws the eye with anti-aliased boundaries, then blurs and adds noise.
pub fn render(
    subject: &SubjectParams,
    truth: &Truth,
    droop: f64,
    blur: usize,
    noise_std: f64,
    rng: &mut StreamRng,
) -> Result<Image> {
    let Truth {
        iris_r: ir,
        pupil_r: pr,
        cx,
        cy,
    } = *truth;
    let (w, h) = (IMAGE_WIDTH as f64, IMAGE_HEIGHT as f64);
    if !(pr > 0.0 && pr < ir)
        || cx - ir < 0.0
        || cx + ir > w - 1.0
        || cy - ir < 0.0
        || cy + ir > h - 1.0
    {
        return Err(Error::InvalidArgument(format!(
            "eye (center {cx:.1},{cy:.1}, iris {ir:.1}, pupil {pr:.1}) does not fit the {IMAGE_WIDTH}x{IMAGE_HEIGHT} frame"
        )));
    }
    // eyelid parabolas keep the iris visible within ±35° of horizontal
    let half_w = 1.7 * ir;
    let upper = ir * (0.95 - droop);
    let lower = 0.9 * ir;
    let mut img = Image::standard(0.0);
    for y in 0..IMAGE_HEIGHT {
        for x in 0..IMAGE_WIDTH {
            let (fx, fy) = (x as f64, y as f64);
            let skin = subject.skin_level + 0.04 * (1.0 - fy / h);
            let u = (fx - cx) / half_w;
            let open = (1.0 - u * u).max(0.0);
            let lid = coverage((fy - (cy - upper * open)).min((cy + lower * open) - fy));
            let v = if lid > 0.0 {
                let (dx, dy) = (fx - cx, fy - cy);
                let d = (dx * dx + dy * dy).sqrt();
                let ramp = ((d - pr) / 4.0).clamp(0.0, 1.0) * ((ir - d) / 3.0).clamp(0.0, 1.0);
                let iris = subject.iris_level + ramp * subject.texture_at(dy.atan2(dx));
                let ci = coverage(ir - d);
                let cp = coverage(pr - d);
                let eye = cp * PUPIL_LEVEL + (1.0 - cp) * (ci * iris + (1.0 - ci) * SCLERA_LEVEL);
                lid * eye + (1.0 - lid) * skin
            } else {
                skin
            };
            img.set(y, x, v);
        }
    }
    if blur > 1 {
        img = horizontal_blur(&img, blur);
    }
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for p in img.pixels_mut() {
            *p += n.sample(rng);
        }
    }
    img.pixels_mut()
        .iter_mut()
        .for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(img)
}

/// Box blur of `length` pixels along rows, clamping at the borders.
pub fn horizontal_blur(img: &Image, length: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let before = (length - 1) / 2;
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..length)
                .map(|k| {
                    let xx = (x + k).saturating_sub(before).min(w - 1);
                    img.get(y, xx)
                })
                .sum();
            out.set(y, x, s / length as f64);
        }
    }
    out
}

/// Renders the whole dataset under `out_dir/images` and writes
/// `out_dir/manifest.csv`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let subjects: Vec<SubjectParams> = (0..spec.subjects)
        .map(|s| SubjectParams::sample(spec.seed, s))
        .collect();
    let jobs: Vec<(usize, Session, usize)> = (0..spec.subjects)
        .flat_map(|s| {
            Session::ALL
                .into_iter()
                .flat_map(move |se| (0..spec.frames).map(move |f| (s, se, f)))
        })
        .collect();
    let records = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(s, session, frame))| {
            let mut rng = stream(spec.seed, "data", index as u64);
            let (img, truth) = synth_image(
                &subjects[s],
                &spec.sessions[session.index()],
                spec.noise_std,
                &mut rng,
            )?;
            let rel = format!("images/p{:02}_{session}_f{frame:02}.pgm", s + 1);
            img.save_pgm(out_dir.join(&rel))?;
            let mut rec = ManifestRecord {
                subject_id: format!("P{:02}", s + 1),
                session,
                minutes: session.minutes(),
                eye: if frame < spec.frames.div_ceil(2) {
                    Eye::L
                } else {
                    Eye::R
                },
                label: session.label(),
                path: rel,
                iris_r: None,
                pupil_r: None,
                cx: None,
                cy: None,
            };
            rec.set_truth(Some(truth));
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(out_dir, records);
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

// ------------------------------------------------------------------- split

/// Partitions subjects (not images) into train and test halves.
///
/// The train half receives `round(train_fraction · subjects)` subjects,
/// clamped so that both halves are non-empty.
pub fn split_subject_disjoint(
    manifest: &Manifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0,1)"
        )));
    }
    let mut subjects: Vec<String> = manifest.subjects().into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a subject-disjoint split needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    subjects.shuffle(&mut stream(seed, "split", 0));
    let n_train =
        ((train_fraction * subjects.len() as f64).round() as usize).clamp(1, subjects.len() - 1);
    let train_set: BTreeSet<&String> = subjects[..n_train].iter().collect();
    let train = manifest.filter(|r| train_set.contains(&r.subject_id));
    let test = manifest.filter(|r| !train_set.contains(&r.subject_id));
    verify_subject_disjoint(&train, &test)?;
    Ok((train, test))
}

pub fn verify_subject_disjoint(a: &Manifest, b: &Manifest) -> Result<()> {
    let shared: Vec<String> = a.subjects().intersection(&b.subjects()).cloned().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::SubjectOverlap(shared))
    }
}

// ------------------------------------------------------------ augmentation

/// Random geometric augmentation. Mirroring is never applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub rotation_degrees: f64,
    pub shift_fraction: f64,
    pub zoom_fraction: f64,
    pub multiplier: usize,
    /// Keep the source images alongside the augmented copies.
    pub include_originals: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation_degrees: 10.0,
            shift_fraction: 0.2,
            zoom_fraction: 0.15,
            multiplier: 4,
            include_originals: false,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.rotation_degrees)
            || !ok(self.shift_fraction)
            || !(ok(self.zoom_fraction) && self.zoom_fraction < 1.0)
        {
            return Err(Error::Config(format!(
                "invalid augmentation ranges: {self:?}"
            )));
        }
        if self.multiplier == 0 {
            return Err(Error::Config("augmentation multiplier must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sampled transform: rotate about the image center, zoom, then shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation_degrees: f64,
    /// Shifts as fractions of the width / height.
    pub shift_x: f64,
    pub shift_y: f64,
    pub zoom: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        rotation_degrees: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        zoom: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> Self {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        AugmentDraw {
            rotation_degrees: sym(rng, spec.rotation_degrees),
            shift_x: sym(rng, spec.shift_fraction),
            shift_y: sym(rng, spec.shift_fraction),
            zoom: 1.0 + sym(rng, spec.zoom_fraction),
        }
    }

    /// Maps a source point `(y, x)` to its output position.
    pub fn forward(&self, y: f64, x: f64, height: usize, width: usize) -> (f64, f64) {
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_degrees.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let rx = c * dx - s * dy;
        let ry = s * dx + c * dy;
        (
            cy + self.zoom * ry + self.shift_y * height as f64,
            cx + self.zoom * rx + self.shift_x * width as f64,
        )
    }

    /// Resamples `image` through the composed map with bilinear
    /// interpolation and nearest-edge fill.
    pub fn apply(&self, image: &Image) -> Image {
        let (h, w) = (image.height(), image.width());
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_degrees.to_radians().sin_cos();
        let mut out = Image::filled(h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                let qx = (x as f64 - cx - self.shift_x * w as f64) / self.zoom;
                let qy = (y as f64 - cy - self.shift_y * h as f64) / self.zoom;
                let sx = c * qx + s * qy + cx;
                let sy = -s * qx + c * qy + cy;
                out.set(y, x, image.sample_bilinear(sy, sx));
            }
        }
        out
    }

    pub fn transform_truth(&self, t: &Truth, height: usize, width: usize) -> Truth {
        let (cy, cx) = self.forward(t.cy, t.cx, height, width);
        Truth {
            iris_r: t.iris_r * self.zoom,
            pupil_r: t.pupil_r * self.zoom,
            cx,
            cy,
        }
    }
}

pub fn augment(image: &Image, spec: &AugmentSpec, rng: &mut StreamRng) -> Image {
    AugmentDraw::sample(spec, rng).apply(image)
}

/// Writes `multiplier` augmented copies of every record under
/// `out_dir/images` and returns the new manifest (also written to
/// `out_dir/manifest.csv`).
pub fn augment_dataset(
    manifest: &Manifest,
    spec: &AugmentSpec,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let m = spec.multiplier;
    let augmented = (0..manifest.len() * m)
        .into_par_iter()
        .map(|job| {
            let (i, k) = (job / m, job % m);
            let rec = &manifest.records[i];
            let img = manifest.load_image(rec)?;
            let draw = AugmentDraw::sample(spec, &mut stream(seed, "augment", job as u64));
            let rel = format!("images/aug_{i:05}_{k}.pgm");
            draw.apply(&img).save_pgm(out_dir.join(&rel))?;
            let mut out = rec.clone();
            out.path = rel;
            out.set_truth(
                rec.truth()
                    .map(|t| draw.transform_truth(&t, img.height(), img.width())),
            );
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(augmented.len() + manifest.len());
    if spec.include_originals {
        for r in &manifest.records {
            let mut r = r.clone();
            r.path = relative_path(&manifest.image_path(&r), out_dir)?;
            records.push(r);
        }
    }
    records.extend(augmented);
    let result = Manifest::new(out_dir, records);
    result.write(out_dir.join("manifest.csv"))?;
    Ok(result)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Image::load_pgm(path)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    image.save_pgm(path)
}
