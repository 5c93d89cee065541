//! Grayscale images in `[0,1]` and the binary PGM (P5) / PPM (P6) codecs.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IMAGE_HEIGHT: usize = 120;
pub const IMAGE_WIDTH: usize = 160;
pub const IMAGE_PIXELS: usize = IMAGE_HEIGHT * IMAGE_WIDTH;

/// Row-major single-channel intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width} needs {} pixels, got {}",
                    height * width,
                    pixels.len()
                ),
            ));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    /// A 120×160 image filled with `value`.
    pub fn standard(value: f64) -> Self {
        Self::filled(IMAGE_HEIGHT, IMAGE_WIDTH, value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous `(y, x)`; coordinates outside the
    /// frame are clamped to the nearest edge pixel.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn is_standard_size(&self) -> bool {
        self.height == IMAGE_HEIGHT && self.width == IMAGE_WIDTH
    }

    pub fn ensure_standard(&self) -> Result<()> {
        if self.is_standard_size() {
            Ok(())
        } else {
            Err(Error::shape(
                "image",
                format!(
                    "expected {IMAGE_HEIGHT}x{IMAGE_WIDTH}, got {}x{}",
                    self.height, self.width
                ),
            ))
        }
    }

    /// `[1, H, W]` tensor view for the convolutional models.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width], self.pixels.clone())
            .expect("image dims are positive")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => {
                return Err(Error::shape(
                    "image",
                    format!("cannot view {s:?} as an image"),
                ))
            }
        };
        Image::new(h, w, t.values().to_vec())
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (w, h, data) = parse_netpbm(bytes, b"P5", 1, path)?;
        Image::new(h, w, data.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode_pgm())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes, path)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Three-channel 8-bit image, stored interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (width, height, data) = parse_netpbm(bytes, b"P6", 3, path)?;
        Ok(RgbImage {
            height,
            width,
            data: data.to_vec(),
        })
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode_ppm())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes, path)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Writes through a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses a binary netpbm header (`magic`, width, height, maxval 255) and
/// returns the raster.
fn parse_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8],
    channels: usize,
    path: &Path,
) -> Result<(usize, usize, &'a [u8])> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if !bytes.starts_with(magic) {
        return Err(fail(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][k];
            return Err(fail(start, format!("expected {what}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fail(pos, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(fail(pos, format!("degenerate dimensions {width}x{height}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected single whitespace after header".into()));
    }
    pos += 1;
    let need = width * height * channels;
    let data = &bytes[pos..];
    if data.len() != need {
        return Err(fail(
            pos + data.len().min(need),
            format!(
                "raster holds {} bytes, header declares {width}x{height}x{channels} = {need}",
                data.len()
            ),
        ));
    }
    Ok((width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.pgm")
    }

    #[test]
    fn black_and_white_round_trip_exactly() {
        for v in [0.0, 1.0] {
            let img = Image::standard(v);
            let back = Image::decode_pgm(&img.encode_pgm(), p()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn wrong_dimensions_header_is_typed_error() {
        let mut bytes = Image::filled(4, 5, 0.5).encode_pgm();
        bytes.pop();
        match Image::decode_pgm(&bytes, p()) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        let bad = b"P5\n4 x\n255\n";
        match Image::decode_pgm(bad, p()) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 5);
                assert!(msg.contains("height"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Image::decode_pgm(b"P6\n1 1\n255\n\0\0\0", p()),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = Image::decode_pgm(&bytes, p()).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage {
            height: 2,
            width: 3,
            data: (0..18).map(|v| v * 14).collect(),
        };
        let back = RgbImage::decode_ppm(&img.encode_ppm(), Path::new("x.ppm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bilinear_clamps_to_edges() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(img.sample_bilinear(0.5, 0.5), 1.5);
        assert_eq!(img.sample_bilinear(-4.0, -4.0), 0.0);
        assert_eq!(img.sample_bilinear(9.0, 9.0), 3.0);
    }

    proptest! {
        #[test]
        fn pgm_quantization_error_bounded(pixels in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let img = Image::new(3, 4, pixels).unwrap();
            let back = Image::decode_pgm(&img.encode_pgm(), p()).unwrap();
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
