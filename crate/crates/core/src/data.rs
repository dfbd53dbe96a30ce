//! Grayscale image I/O (binary PGM and 8-bit PNG), AWGN, patch extraction,
//! manifests and a synthetic image generator.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Grayscale image with pixels in `[0, 1]` (unclamped after noise).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape("image", format!("{height}x{width} image with {} pixels", pixels.len())));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        GrayImage { height, width, pixels: vec![v; height * width] }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// Clamp to `[0, 1]` and round half away from zero.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn clamped(&self) -> GrayImage {
        GrayImage { pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..*self }
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<GrayImage> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Sizing(format!(
                "{height}x{width} crop at ({row},{col}) leaves the {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width);
        for r in row..row + height {
            pixels.extend_from_slice(&self.pixels[r * self.width + col..r * self.width + col + width]);
        }
        Ok(GrayImage { height, width, pixels })
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.pixels.clone()).expect("validated image")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => Self::new(h, w, t.data().to_vec()),
            ref s => Err(Error::shape("image", format!("cannot view {s:?} as an image"))),
        }
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 2;
    let mut field = || -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err(path, "truncated PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "malformed PGM header"))
    };
    if !bytes.starts_with(b"P5") {
        return Err(format_err(path, "not a binary PGM"));
    }
    let (w, h, maxval) = (field()?, field()?, field()?);
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported PGM maxval {maxval}; only 8-bit is read")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "malformed PGM header"));
    }
    let payload = &bytes[pos + 1..];
    if w == 0 || h == 0 || payload.len() < w * h {
        return Err(format_err(path, format!("{w}x{h} PGM with {} payload bytes", payload.len())));
    }
    GrayImage::from_u8(h, w, &payload[..w * h])
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.to_u8())
        .ok_or_else(|| Error::shape("image", "pixel count mismatch"))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Sizing(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| format_err(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => GrayImage::from_u8(g.height() as usize, g.width() as usize, g.as_raw()),
        other => Err(format_err(path, format!("only 8-bit grayscale PNG is supported, found {:?}", other.color()))),
    }
}

/// Load a P5 PGM or 8-bit grayscale PNG, sniffing the format from its bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, path)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(&bytes, path)
    } else {
        Err(format_err(path, "unrecognized format (expected binary PGM or PNG)"))
    }
}

/// Save by extension: `.pgm` or `.png`.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pgm") => encode_pgm(img),
        Some("png") => encode_png(img)?,
        _ => return Err(format_err(path, "output must end in .pgm or .png")),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Noise level on the 8-bit scale and the seed of its stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma >= 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("noise sigma {} must be finite and non-negative", self.sigma)))
        }
    }
}

/// `pixel + (σ/255)·g`, unclamped, with `g` drawn in raster order.
pub fn add_awgn(img: &GrayImage, cfg: NoiseConfig) -> Result<GrayImage> {
    cfg.validate()?;
    Ok(add_awgn_from(img, cfg.sigma, &mut Stream::new(cfg.seed)))
}

pub fn add_awgn_from(img: &GrayImage, sigma: f64, stream: &mut Stream) -> GrayImage {
    let s = sigma / 255.0;
    let pixels = img.pixels.iter().map(|&p| (f64::from(p) + s * stream.gaussian()) as f32).collect();
    GrayImage { pixels, ..*img }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchRef {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSet {
    pub size: usize,
    pub stride: usize,
    pub patches: Vec<PatchRef>,
}

/// Row-major top-left corners of every `size`×`size` patch at `stride`.
pub fn extract_patches(img: &GrayImage, size: usize, stride: usize) -> Result<PatchSet> {
    PatchSet::from_images(std::slice::from_ref(img), size, stride)
}

impl PatchSet {
    pub fn from_images(images: &[GrayImage], size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        let mut patches = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if size > img.height || size > img.width {
                return Err(Error::Sizing(format!(
                    "patch size {size} exceeds image {i} ({}x{})",
                    img.height, img.width
                )));
            }
            for row in (0..=img.height - size).step_by(stride) {
                for col in (0..=img.width - size).step_by(stride) {
                    patches.push(PatchRef { image: i, row, col });
                }
            }
        }
        Ok(PatchSet { size, stride, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch references in a seeded Fisher–Yates order.
    pub fn iterate(&self, shuffle_seed: u64) -> Vec<PatchRef> {
        let mut order = self.patches.clone();
        Stream::new(shuffle_seed).shuffle(&mut order);
        order
    }

    pub fn get(&self, images: &[GrayImage], p: PatchRef) -> Result<GrayImage> {
        images
            .get(p.image)
            .ok_or_else(|| Error::Sizing(format!("patch refers to missing image {}", p.image)))?
            .crop(p.row, p.col, self.size, self.size)
    }
}

/// One image path per line; `#` starts a comment; relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, GrayImage)>> {
    let paths = read_manifest(&path)?;
    if paths.is_empty() {
        return Err(format_err(path.as_ref(), "manifest lists no images"));
    }
    paths.into_iter().map(|p| load_image(&p).map(|img| (p, img))).collect()
}

/// Piecewise-smooth test image: a shaded background with overlapping
/// rectangles, disks and one striped region, quantized to 8 bits.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> GrayImage {
    let mut s = Stream::new(seed).substream("synthetic");
    let (h, w) = (height as f64, width as f64);
    let (gx, gy, base) = (s.uniform(-0.3, 0.3), s.uniform(-0.3, 0.3), s.uniform(0.3, 0.7));
    let mut px: Vec<f64> = (0..height * width)
        .map(|i| base + gx * ((i % width) as f64 / w - 0.5) + gy * ((i / width) as f64 / h - 0.5))
        .collect();
    let n_shapes = 3 + s.below(4);
    for _ in 0..n_shapes {
        let v = s.uniform(0.05, 0.95);
        let (cy, cx) = (s.uniform(0.0, h), s.uniform(0.0, w));
        let (ry, rx) = (s.uniform(0.1, 0.35) * h, s.uniform(0.1, 0.35) * w);
        let disk = s.below(2) == 0;
        for (i, p) in px.iter_mut().enumerate() {
            let (dy, dx) = (((i / width) as f64 - cy) / ry, ((i % width) as f64 - cx) / rx);
            let inside = if disk { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
            if inside {
                *p = v;
            }
        }
    }
    let (y0, x0) = (s.below(height / 2 + 1), s.below(width / 2 + 1));
    let period = 4.0 + s.uniform(0.0, 4.0);
    let amp = s.uniform(0.1, 0.25);
    for r in y0..(y0 + height / 3).min(height) {
        for c in x0..(x0 + width / 3).min(width) {
            px[r * width + c] += amp * (std::f64::consts::TAU * c as f64 / period).sin();
        }
    }
    let pixels = px.iter().map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32).collect();
    GrayImage { height, width, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_map_to_unit_interval() {
        let img = decode_pgm(b"P5\n2 2\n255\n\x00\x80\xff\x40", Path::new("t.pgm")).unwrap();
        assert_eq!(img.pixels, vec![0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn pgm_header_comments_and_bad_depth() {
        let img = decode_pgm(b"P5 # c\n1 # w\n1\n255\n\x07", Path::new("c.pgm")).unwrap();
        assert_eq!(img.to_u8(), vec![7]);
        let err = decode_pgm(b"P5\n1 1\n65535\n\x00\x00", Path::new("d.pgm")).unwrap_err();
        assert!(matches!(err, Error::Format { ref path, .. } if path == Path::new("d.pgm")));
    }

    #[test]
    fn save_rounds_half_away_and_clamps() {
        let img = GrayImage::new(1, 4, vec![-0.2, 1.5, 0.5 / 255.0, 2.5 / 255.0]).unwrap();
        assert_eq!(img.to_u8(), vec![0, 255, 1, 3]);
    }

    #[test]
    fn patches_enumerate_row_major() {
        let img = GrayImage::filled(64, 64, 0.5);
        let set = extract_patches(&img, 32, 32).unwrap();
        let corners: Vec<_> = set.patches.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(corners, vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
        assert_eq!(extract_patches(&GrayImage::filled(32, 32, 0.0), 32, 8).unwrap().len(), 1);
        assert!(matches!(extract_patches(&img, 65, 1), Err(Error::Sizing(_))));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = synthetic_image(16, 16, 3);
        assert_eq!(add_awgn(&img, NoiseConfig { sigma: 0.0, seed: 9 }).unwrap(), img);
        assert!(add_awgn(&img, NoiseConfig { sigma: -1.0, seed: 9 }).is_err());
    }

    #[test]
    fn synthetic_is_quantized_and_seeded() {
        let a = synthetic_image(40, 30, 1);
        assert_eq!(a, synthetic_image(40, 30, 1));
        assert_ne!(a, synthetic_image(40, 30, 2));
        assert_eq!(GrayImage::from_u8(40, 30, &a.to_u8()).unwrap(), a);
    }
}
