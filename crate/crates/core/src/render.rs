//! Patch-wise rendering of whole views and image metrics.

use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::geometry::{quantize, Camera, RgbaImage};
use crate::network::{forward, multires_preprocess, ModelConfig, ModelParams, NetworkError, SweepInputs, PATCH_OUTPUT};
use crate::psv::{DepthSampling, PosedImage, Region};

/// Full-frame network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub region: Region,
    /// `[3, H, W]`, unclamped.
    pub image: Tensor<f32>,
    /// `[D, H, W]`
    pub selection: Tensor<f32>,
    /// `[D, 3, H, W]`
    pub colors: Tensor<f32>,
    pub timings: Vec<PatchTiming>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTiming {
    pub x0: i64,
    pub y0: i64,
    pub micros: u128,
}

/// Renders `region` of the target view as independent `tile x tile` patches.
pub fn render_region(
    sources: &[PosedImage],
    target: &Camera,
    sampling: &DepthSampling,
    params: &ModelParams<f32>,
    config: &ModelConfig,
    region: Region,
    tile: usize,
) -> Result<Rendering, NetworkError> {
    if tile == 0 || region.is_empty() {
        return Err(NetworkError::InvalidArgument("tile size and region must be non-empty".into()));
    }
    let (w, h, d) = (region.width as usize, region.height as usize, config.depth_planes);
    let patches: Vec<(usize, usize, usize, usize)> = (0..h)
        .step_by(tile)
        .flat_map(|y| (0..w).step_by(tile).map(move |x| (x, y, tile.min(w - x), tile.min(h - y))))
        .collect();
    let sweep = SweepInputs { sources, target, sampling };
    let outputs = patches
        .par_iter()
        .map(|&(x, y, pw, ph)| {
            let started = Instant::now();
            let r = Region::new(region.x0 + x as i64, region.y0 + y as i64, pw as u32, ph as u32);
            let input = multires_preprocess::<f32>(r, &sweep, config)?;
            let pred = forward(&input, params, config)?;
            Ok((pred, started.elapsed().as_micros()))
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;

    let mut image = vec![0.0f32; 3 * h * w];
    let mut selection = vec![0.0f32; d * h * w];
    let mut colors = vec![0.0f32; d * 3 * h * w];
    let mut timings = Vec::with_capacity(patches.len());
    for (&(x, y, pw, ph), (pred, micros)) in patches.iter().zip(outputs) {
        let blit = |dst: &mut [f32], src: &[f32], planes: usize| {
            for p in 0..planes {
                for yy in 0..ph {
                    let s = (p * ph + yy) * pw;
                    let t = (p * h + y + yy) * w + x;
                    dst[t..t + pw].copy_from_slice(&src[s..s + pw]);
                }
            }
        };
        blit(&mut image, pred.image.data(), 3);
        blit(&mut selection, pred.selection.0.data(), d);
        blit(&mut colors, pred.colors.0.data(), 3 * d);
        timings.push(PatchTiming { x0: region.x0 + x as i64, y0: region.y0 + y as i64, micros });
    }
    Ok(Rendering {
        region,
        image: Tensor::new(vec![3, h, w], image)?,
        selection: Tensor::new(vec![d, h, w], selection)?,
        colors: Tensor::new(vec![d, 3, h, w], colors)?,
        timings,
    })
}

/// Renders the whole target view in standard 8x8 patches.
pub fn render_full(
    sources: &[PosedImage],
    target: &Camera,
    sampling: &DepthSampling,
    params: &ModelParams<f32>,
    config: &ModelConfig,
) -> Result<Rendering, NetworkError> {
    render_region(sources, target, sampling, params, config, Region::full(target), PATCH_OUTPUT)
}

/// `[3, H, W]` values clamped to `[0, 1]` as an opaque image.
pub fn tensor_to_image(t: &Tensor<f32>) -> RgbaImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let c = |ch: usize| d[ch * h * w + p].clamp(0.0, 1.0);
        [c(0), c(1), c(2), 1.0]
    })
    .expect("values are clamped")
}

/// The image as it would be stored in an 8-bit PNG.
pub fn quantized(img: &RgbaImage) -> RgbaImage {
    let data = img.as_raw().iter().map(|&v| quantize(v) as f32 / 255.0).collect();
    RgbaImage::from_raw(img.width(), img.height(), data).expect("quantized values lie in [0, 1]")
}

/// Per-pixel error summary over RGB channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean absolute error over pixels and channels.
    pub mean_l1: f64,
    pub mse: f64,
    /// `10 log10(1 / mse)`, capped at [`PSNR_CAP`].
    pub psnr: f64,
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Compares the RGB channels of two same-sized images.
pub fn image_metrics(pred: &RgbaImage, target: &RgbaImage) -> Result<Metrics, NetworkError> {
    if (pred.width(), pred.height()) != (target.width(), target.height()) {
        return Err(NetworkError::InvalidArgument(format!(
            "cannot compare {}x{} with {}x{}",
            pred.width(),
            pred.height(),
            target.width(),
            target.height()
        )));
    }
    let (mut l1, mut se, mut n) = (0.0f64, 0.0f64, 0usize);
    for (p, t) in pred.as_raw().chunks_exact(4).zip(target.as_raw().chunks_exact(4)) {
        for c in 0..3 {
            let d = p[c] as f64 - t[c] as f64;
            l1 += d.abs();
            se += d * d;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mse = se / n;
    Ok(Metrics { mean_l1: l1 / n, mse, psnr: psnr_from_mse(mse) })
}
