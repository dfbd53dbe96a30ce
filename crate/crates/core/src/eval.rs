//! PSNR evaluation, whole-image and tiled denoising, receptive-field tracing
//! and paired k-ablation reports.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::digest;
use crate::config::RunConfig;
use crate::data::{add_awgn_from, GrayImage};
use crate::error::{Error, Result};
use crate::layer::{receptive_mask_step, ReceptiveMask};
use crate::network::GraphCnnModel;
use crate::rng::Stream;
use crate::tensor::BnMode;

/// `10·log10(1 / MSE)` with `test` clamped to `[0, 1]`; `+∞` when equal.
pub fn psnr(clean: &GrayImage, test: &GrayImage) -> Result<f64> {
    if (clean.height, clean.width) != (test.height, test.width) {
        return Err(Error::shape(
            "psnr",
            format!("{}x{} vs {}x{}", clean.height, clean.width, test.height, test.width),
        ));
    }
    let se: f64 = clean
        .pixels
        .iter()
        .zip(&test.pixels)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b.clamp(0.0, 1.0))).powi(2))
        .sum();
    let mse = se / clean.pixels.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Decibels with four decimals, or `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec { tile: 96, overlap: 16 }
    }
}

/// Tile origins along one axis; the last tile is flush with the edge.
fn tile_origins(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = (tile - overlap).max(1);
    let mut out: Vec<usize> = (0..len - tile).step_by(stride).collect();
    out.push(len - tile);
    out
}

/// Denoise a whole image, or overlapping tiles averaged uniformly. The
/// result is clamped to `[0, 1]`.
pub fn denoise_image(model: &GraphCnnModel<f32>, noisy: &GrayImage, tile: Option<TileSpec>) -> Result<GrayImage> {
    let Some(spec) = tile else {
        let out = model.infer(&noisy.to_tensor()).map_err(add_tile_hint)?;
        return Ok(GrayImage::from_tensor(&out.denoised)?.clamped());
    };
    if spec.tile == 0 || spec.overlap >= spec.tile {
        return Err(Error::Config(format!("tile {} with overlap {} is not usable", spec.tile, spec.overlap)));
    }
    let (h, w) = (noisy.height, noisy.width);
    let (th, tw) = (spec.tile.min(h), spec.tile.min(w));
    let tiles: Vec<(usize, usize)> = tile_origins(h, spec.tile, spec.overlap)
        .into_iter()
        .flat_map(|r| tile_origins(w, spec.tile, spec.overlap).into_iter().map(move |c| (r, c)))
        .collect();
    let outs = tiles
        .par_iter()
        .map(|&(r, c)| {
            let crop = noisy.crop(r, c, th, tw)?;
            GrayImage::from_tensor(&model.infer(&crop.to_tensor())?.denoised)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (&(r, c), out) in tiles.iter().zip(&outs) {
        for y in 0..th {
            for x in 0..tw {
                sum[(r + y) * w + c + x] += f64::from(out.pixels[y * tw + x]);
                count[(r + y) * w + c + x] += 1;
            }
        }
    }
    let pixels = sum.iter().zip(&count).map(|(&s, &n)| ((s / f64::from(n)) as f32).clamp(0.0, 1.0)).collect();
    GrayImage::new(h, w, pixels)
}

fn add_tile_hint(e: Error) -> Error {
    match e {
        Error::Sizing(msg) => {
            Error::Sizing(format!("{msg}; for large images enable tiling with a tile larger than the window"))
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub noisy_psnr: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config_digest: String,
    pub checkpoint_digest: String,
    pub wall_seconds: f64,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    v.sum::<f64>() / n as f64
}

impl EvalReport {
    /// Mean denoised PSNR.
    pub fn average(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn noisy_average(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.noisy_psnr))
    }

    /// Header, one row per image, an `average` row, then `#` provenance lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tnoisy_psnr\tpsnr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}", r.name, format_db(r.noisy_psnr), format_db(r.psnr));
        }
        let _ = writeln!(s, "average\t{}\t{}", format_db(self.noisy_average()), format_db(self.average()));
        let _ = writeln!(s, "# config_digest\t{}", self.config_digest);
        let _ = writeln!(s, "# checkpoint_digest\t{}", self.checkpoint_digest);
        let _ = writeln!(s, "# wall_seconds\t{:.3}", self.wall_seconds);
        s
    }
}

/// Noisy copy of evaluation image `index` at `sigma`; the same across runs.
pub fn eval_noisy(img: &GrayImage, sigma: f64, seed: u64, index: usize) -> GrayImage {
    add_awgn_from(img, sigma, &mut Stream::new(seed).substream("eval").indexed(index as u64))
}

/// Add noise to each clean image, denoise it, and score both.
pub fn evaluate(
    model: &GraphCnnModel<f32>,
    checkpoint_digest: &str,
    images: &[(String, GrayImage)],
    sigma: f64,
    seed: u64,
    tile: Option<TileSpec>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let cfg = RunConfig { network: model.config().clone(), ..RunConfig::default() };
    let rows = images
        .par_iter()
        .enumerate()
        .map(|(i, (name, clean))| {
            let noisy = eval_noisy(clean, sigma, seed, i);
            let out = denoise_image(model, &noisy, tile)?;
            Ok(EvalRow { name: name.clone(), noisy_psnr: psnr(clean, &noisy)?, psnr: psnr(clean, &out)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rows,
        config_digest: digest(toml::to_string(&cfg.network).unwrap_or_default().as_bytes()),
        checkpoint_digest: checkpoint_digest.to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Dependency masks of output `pixel` through GC layers `1..=upto_layer`,
/// using the graphs built for `image`.
pub fn trace_receptive_field(
    model: &GraphCnnModel<f32>,
    image: &GrayImage,
    pixel: (usize, usize),
    upto_layer: usize,
) -> Result<Vec<ReceptiveMask>> {
    let (h, w) = (image.height, image.width);
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::OutOfRange(format!("pixel ({},{}) outside the {h}x{w} image", pixel.0, pixel.1)));
    }
    let depth = model.config().depth();
    if upto_layer == 0 || upto_layer > depth {
        return Err(Error::OutOfRange(format!("layer {upto_layer} not in 1..={depth}")));
    }
    let out = if model.running_stats_ready() {
        model.infer(&image.to_tensor())?
    } else {
        model.clone().forward(&image.to_tensor(), BnMode::Train)?
    };
    let layers = model.arch.layer_graphs(&out.graphs, 0);
    let seed = ReceptiveMask::seed(h, w, pixel.0, pixel.1);
    Ok((1..=upto_layer)
        .map(|l| {
            layers[..l].iter().rev().fold(seed.clone(), |mask, graphs| {
                graphs.iter().map(|g| receptive_mask_step(&mask, g, 3)).reduce(|a, b| a.union(&b)).unwrap_or(mask)
            })
        })
        .collect())
}

/// White (1) where the mask is set.
pub fn mask_image(mask: &ReceptiveMask) -> GrayImage {
    let pixels = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    GrayImage { height: mask.height, width: mask.width, pixels }
}

/// Two configurations may be paired only if they differ in `nlg.k` alone.
pub fn check_pairable(a: &RunConfig, b: &RunConfig) -> Result<()> {
    let mut b2 = b.clone();
    b2.network.nlg.k = a.network.nlg.k;
    if &b2 == a {
        Ok(())
    } else {
        Err(Error::Config("ablation runs differ in more than the neighbor count k".into()))
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub k: [usize; 2],
    pub reports: [EvalReport; 2],
}

impl AblationReport {
    /// Average PSNR of the second run minus the first.
    pub fn difference(&self) -> f64 {
        self.reports[1].average() - self.reports[0].average()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tnoisy_psnr");
        for k in self.k {
            let _ = write!(s, "\tpsnr_k{k}");
        }
        s.push_str("\tdifference\n");
        for (a, b) in self.reports[0].rows.iter().zip(&self.reports[1].rows) {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:+.4}",
                a.name,
                format_db(a.noisy_psnr),
                format_db(a.psnr),
                format_db(b.psnr),
                b.psnr - a.psnr
            );
        }
        let _ = writeln!(
            s,
            "average\t{}\t{}\t{}\t{:+.4}",
            format_db(self.reports[0].noisy_average()),
            format_db(self.reports[0].average()),
            format_db(self.reports[1].average()),
            self.difference()
        );
        let expected = if self.difference() >= 0.0 { "matches" } else { "does not match" };
        let _ = writeln!(
            s,
            "# direction\tk={} vs k={}: {:+.4} dB, {expected} the expectation that non-local neighbors help",
            self.k[1],
            self.k[0],
            self.difference()
        );
        s
    }
}
