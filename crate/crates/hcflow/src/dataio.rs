//! Image I/O, bicubic resampling, the patch pipeline, and evaluation
//! metrics (PSNR on RGB and on the BT.601 Y channel, SSIM, sample
//! diversity, LR consistency).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::rng::SplitMix64;
use crate::numerics::tensor::{Shape4, Tensor4};

/// An HR image with its bicubic LR counterpart.
#[derive(Debug, Clone)]
pub struct ImagePair {
    /// (1, 3, H, W), values in [0, 1].
    pub hr: Tensor4,
    /// (1, 3, H/scale, W/scale), bicubic-downscaled from `hr`.
    pub lr: Tensor4,
    pub source: String,
}

impl ImagePair {
    /// Builds the pair by bicubic-downscaling `hr` by `scale`.
    pub fn from_hr(hr: Tensor4, scale: usize, source: impl Into<String>) -> Result<Self> {
        let s = hr.shape();
        if s.c != 3 {
            return Err(Error::shape(
                "image_pair",
                format!("expected 3 channels, got {}", s.c),
            ));
        }
        if scale == 0 || s.h % scale != 0 || s.w % scale != 0 {
            return Err(Error::invalid(
                "image_pair",
                format!("HR {}×{} not divisible by scale {scale}", s.h, s.w),
            ));
        }
        let lr = bicubic_resize(&hr, s.h / scale, s.w / scale, true)?;
        Ok(ImagePair {
            hr,
            lr,
            source: source.into(),
        })
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

/// Loads an 8-bit RGB PNG as a (1, 3, H, W) tensor with values in [0, 1].
pub fn load_png(path: &Path) -> Result<Tensor4> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::Image(format!(
                "{}: expected 8-bit RGB, got {other:?}",
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let t = Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
        rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    });
    Ok(t)
}

/// Saves a (1, 3, H, W) tensor as an 8-bit RGB PNG, quantizing by
/// round(255·clamp(t, 0, 1)).
pub fn save_png(t: &Tensor4, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.b != 1 || s.c != 3 {
        return Err(Error::shape(
            "save_png",
            format!("expected (1,3,H,W), got {s}"),
        ));
    }
    let mut buf = image::RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let px = [0, 1, 2].map(|c| {
                let v = t.at(0, c, y, x).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Bicubic resampling
// ---------------------------------------------------------------------------

/// Cubic convolution kernel with a = −0.5 (Catmull-Rom).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Precomputed sample taps for one output axis position.
struct Taps {
    start: isize,
    weights: Vec<f64>,
}

/// Tap positions/weights for resizing an axis from `n_in` to `n_out`.
/// When shrinking and `antialias` is set, the kernel is stretched by the
/// inverse scale so it averages over the source footprint.
fn axis_taps(n_in: usize, n_out: usize, antialias: bool) -> Vec<Taps> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if antialias && scale < 1.0 {
        1.0 / scale
    } else {
        1.0
    };
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            // center of output pixel o in input coordinates
            let center = (o as f64 + 0.5) / scale - 0.5;
            let start = (center - support).ceil() as isize;
            let stop = (center + support).floor() as isize;
            let mut weights: Vec<f64> = (start..=stop)
                .map(|i| cubic((i as f64 - center) / stretch))
                .collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            Taps { start, weights }
        })
        .collect()
}

/// Resizes every item/channel plane to `out_h`×`out_w` with cubic
/// convolution (a = −0.5), clamped edges, and optional antialiasing on
/// downscale. Separable: horizontal pass then vertical, accumulated in f64.
pub fn bicubic_resize(t: &Tensor4, out_h: usize, out_w: usize, antialias: bool) -> Result<Tensor4> {
    let s = t.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bicubic_resize",
            format!("target size {out_h}×{out_w} must be nonzero"),
        ));
    }
    if s.h == out_h && s.w == out_w {
        return Ok(t.clone());
    }
    let htaps = axis_taps(s.w, out_w, antialias);
    let vtaps = axis_taps(s.h, out_h, antialias);
    // horizontal pass: (s.h, out_w) planes in f64
    let mut out = Tensor4::zeros(Shape4::new(s.b, s.c, out_h, out_w));
    let mut row_buf = vec![0.0f64; s.h * out_w];
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for (x, tap) in htaps.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for (k, &w) in tap.weights.iter().enumerate() {
                        let xi = (tap.start + k as isize).clamp(0, s.w as isize - 1) as usize;
                        acc += w * t.at(b, c, y, xi) as f64;
                    }
                    row_buf[y * out_w + x] = acc;
                }
            }
            for x in 0..out_w {
                for (y, tap) in vtaps.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for (k, &w) in tap.weights.iter().enumerate() {
                        let yi = (tap.start + k as isize).clamp(0, s.h as isize - 1) as usize;
                        acc += w * row_buf[yi * out_w + x];
                    }
                    out.set(b, c, y, x, acc as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Downscale by an integer factor (the ground-truth LR operator).
pub fn bicubic_down(t: &Tensor4, scale: usize) -> Result<Tensor4> {
    let s = t.shape();
    if scale == 0 || s.h % scale != 0 || s.w % scale != 0 {
        return Err(Error::invalid(
            "bicubic_down",
            format!("{}×{} not divisible by scale {scale}", s.h, s.w),
        ));
    }
    bicubic_resize(t, s.h / scale, s.w / scale, true)
}

/// Upscale by an integer factor (no antialiasing needed when enlarging).
pub fn bicubic_up(t: &Tensor4, scale: usize) -> Result<Tensor4> {
    let s = t.shape();
    if scale == 0 {
        return Err(Error::invalid("bicubic_up", "scale must be nonzero"));
    }
    bicubic_resize(t, s.h * scale, s.w * scale, true)
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// One aligned training batch: HR crops with their LR counterparts.
pub struct PatchBatch {
    /// (batch, 3, hr_patch, hr_patch)
    pub hr: Tensor4,
    /// (batch, 3, hr_patch/scale, hr_patch/scale)
    pub lr: Tensor4,
}

/// Reference flip used by the augmentation tests.
#[cfg(test)]
fn flip_plane(t: &Tensor4, fh: bool, fv: bool) -> Tensor4 {
    let s = t.shape();
    Tensor4::from_fn(s, |b, c, y, x| {
        let ys = if fv { s.h - 1 - y } else { y };
        let xs = if fh { s.w - 1 - x } else { x };
        t.at(b, c, ys, xs)
    })
}

/// Draws `batch` aligned HR/LR crops from the pairs, with optional
/// consistent horizontal/vertical flips. Deterministic for a given rng
/// state. The HR crop is `hr_patch`² at LR-aligned coordinates, and the LR
/// crop is the same region divided by the scale.
pub fn sample_patches(
    pairs: &[ImagePair],
    hr_patch: usize,
    batch: usize,
    augment: bool,
    rng: &mut SplitMix64,
) -> Result<PatchBatch> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no image pairs to sample".into()));
    }
    if batch == 0 {
        return Err(Error::invalid("sample_patches", "batch must be ≥ 1"));
    }
    let scale = {
        let p = &pairs[0];
        if p.lr.shape().h == 0 || p.hr.shape().h % p.lr.shape().h != 0 {
            return Err(Error::shape("sample_patches", "LR dims must divide HR dims"));
        }
        p.hr.shape().h / p.lr.shape().h
    };
    if hr_patch == 0 || hr_patch % scale != 0 {
        return Err(Error::invalid(
            "sample_patches",
            format!("hr_patch {hr_patch} must be a positive multiple of scale {scale}"),
        ));
    }
    let lr_patch = hr_patch / scale;
    let mut hr = Tensor4::zeros(Shape4::new(batch, 3, hr_patch, hr_patch));
    let mut lr = Tensor4::zeros(Shape4::new(batch, 3, lr_patch, lr_patch));
    for bi in 0..batch {
        let p = &pairs[rng.below(pairs.len())];
        let (ph, pw) = (p.hr.shape().h, p.hr.shape().w);
        if hr_patch > ph || hr_patch > pw {
            return Err(Error::invalid(
                "sample_patches",
                format!("patch {hr_patch} exceeds image {ph}×{pw} ({})", p.source),
            ));
        }
        // LR-aligned crop origin so the LR crop is exact
        let ly = rng.below(ph / scale - lr_patch + 1);
        let lx = rng.below(pw / scale - lr_patch + 1);
        let (hy, hx) = (ly * scale, lx * scale);
        let (fh, fv) = if augment {
            (rng.coin(), rng.coin())
        } else {
            (false, false)
        };
        for c in 0..3 {
            for y in 0..hr_patch {
                for x in 0..hr_patch {
                    let ys = if fv { hr_patch - 1 - y } else { y };
                    let xs = if fh { hr_patch - 1 - x } else { x };
                    hr.set(bi, c, y, x, p.hr.at(0, c, hy + ys, hx + xs));
                }
            }
            for y in 0..lr_patch {
                for x in 0..lr_patch {
                    let ys = if fv { lr_patch - 1 - y } else { y };
                    let xs = if fh { lr_patch - 1 - x } else { x };
                    lr.set(bi, c, y, x, p.lr.at(0, c, ly + ys, lx + xs));
                }
            }
        }
    }
    Ok(PatchBatch { hr, lr })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// PSNR reported for identical images (keeps reports finite/serializable).
pub const PSNR_SATURATED: f64 = 100.0;

fn check_same_shape(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("shape mismatch: {} vs {}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// PSNR in dB between [0,1] images, on the 8-bit scale (peak 255).
/// Saturates at [`PSNR_SATURATED`] for identical inputs.
pub fn psnr(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    let n = a.numel() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * 255.0;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_SATURATED);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_SATURATED))
}

/// BT.601 luma on the 0–255 scale from a [0,1] RGB tensor:
/// Y = 65.481·R + 128.553·G + 24.966·B + 16. Output (B, 1, H, W).
pub fn bt601_y(t: &Tensor4) -> Result<Tensor4> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::shape(
            "bt601_y",
            format!("expected 3 channels, got {}", s.c),
        ));
    }
    Ok(Tensor4::from_fn(Shape4::new(s.b, 1, s.h, s.w), |b, _, y, x| {
        65.481 * t.at(b, 0, y, x) + 128.553 * t.at(b, 1, y, x) + 24.966 * t.at(b, 2, y, x) + 16.0
    }))
}

/// PSNR on the BT.601 Y channel (dynamic range 255).
pub fn psnr_y(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_same_shape("psnr_y", a, b)?;
    let ya = bt601_y(a)?;
    let yb = bt601_y(b)?;
    let n = ya.numel() as f64;
    let mse: f64 = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_SATURATED);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_SATURATED))
}

/// 11-tap Gaussian window, σ = 1.5, normalized.
fn ssim_window() -> [f64; 11] {
    let mut w = [0.0f64; 11];
    let sigma = 1.5f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM between two single-channel planes on the 0–255 scale
/// (11×11 Gaussian window σ=1.5, K1=0.01, K2=0.03, L=255). `shave` border
/// pixels are excluded from window centers.
fn ssim_plane(a: &Tensor4, b: &Tensor4, shave: usize) -> Result<f64> {
    let s = a.shape();
    let win = ssim_window();
    const L: f64 = 255.0;
    let c1 = (0.01 * L) * (0.01 * L);
    let c2 = (0.03 * L) * (0.03 * L);
    let half = 5usize;
    let lo_y = shave.max(0);
    let hi_y = s.h.saturating_sub(shave);
    let lo_x = shave;
    let hi_x = s.w.saturating_sub(shave);
    if lo_y >= hi_y || lo_x >= hi_x {
        return Err(Error::invalid(
            "ssim",
            format!("image {}×{} too small for border shave {shave}", s.h, s.w),
        ));
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for bidx in 0..s.b {
        for cy in lo_y..hi_y {
            for cx in lo_x..hi_x {
                // windowed first/second moments (clamped edges)
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ky, &wy) in win.iter().enumerate() {
                    let yy = clamp(cy as isize + ky as isize - half as isize, s.h);
                    for (kx, &wx) in win.iter().enumerate() {
                        let xx = clamp(cx as isize + kx as isize - half as isize, s.w);
                        let w = wy * wx;
                        let va = a.at(bidx, 0, yy, xx) as f64;
                        let vb = b.at(bidx, 0, yy, xx) as f64;
                        ma += w * va;
                        mb += w * vb;
                        maa += w * va * va;
                        mbb += w * vb * vb;
                        mab += w * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                acc += num / den;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// SSIM on the BT.601 Y channel with a `shave`-pixel border excluded.
pub fn ssim(a: &Tensor4, b: &Tensor4, shave: usize) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let ya = bt601_y(a)?;
    let yb = bt601_y(b)?;
    ssim_plane(&ya, &yb, shave)
}

/// Mean over pixels of the standard deviation across samples.
pub fn diversity(samples: &[Tensor4]) -> Result<f64> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("diversity", "need at least one sample"))?;
    for s in samples {
        check_same_shape("diversity", first, s)?;
    }
    if samples.len() == 1 {
        return Ok(0.0);
    }
    let n = samples.len() as f64;
    let numel = first.numel();
    let mut acc = 0.0f64;
    for i in 0..numel {
        let mean: f64 = samples.iter().map(|t| t.data()[i] as f64).sum::<f64>() / n;
        let var: f64 = samples
            .iter()
            .map(|t| (t.data()[i] as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        acc += var.sqrt();
    }
    Ok(acc / numel as f64)
}

/// Full evaluation report for a set of SR samples against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// PSNR of the first sample vs HR, over RGB.
    pub psnr_rgb: f64,
    /// PSNR of the first sample vs HR, on the BT.601 Y channel.
    pub psnr_y: f64,
    /// SSIM of the first sample vs HR on Y, border shaved by `scale`.
    pub ssim: f64,
    /// PSNR between the model's generated LR image and the ground-truth LR,
    /// when the caller provides one.
    pub lr_psnr: Option<f64>,
    /// PSNR between bicubic-downscaled first sample and the ground-truth LR.
    pub consistency: f64,
    /// Mean per-pixel stdev across the samples ([0,1] units).
    pub diversity: f64,
}

/// Computes all metrics for `sr_samples` against `hr`/`lr`.
/// `model_y` is the LR image generated by the model's forward pass.
pub fn metrics(
    sr_samples: &[Tensor4],
    hr: &Tensor4,
    lr: &Tensor4,
    model_y: Option<&Tensor4>,
) -> Result<MetricReport> {
    let first = sr_samples
        .first()
        .ok_or_else(|| Error::invalid("metrics", "need at least one SR sample"))?;
    check_same_shape("metrics", first, hr)?;
    let hs = hr.shape();
    let ls = lr.shape();
    if ls.h == 0 || hs.h % ls.h != 0 || ls.w == 0 || hs.w % ls.w != 0 {
        return Err(Error::shape(
            "metrics",
            format!("LR {ls} does not divide HR {hs}"),
        ));
    }
    let scale = hs.h / ls.h;
    let sr_down = bicubic_down(first, scale)?;
    let lr_psnr = match model_y {
        Some(y) => {
            check_same_shape("metrics", y, lr)?;
            Some(psnr(y, lr)?)
        }
        None => None,
    };
    Ok(MetricReport {
        psnr_rgb: psnr(first, hr)?,
        psnr_y: psnr_y(first, hr)?,
        ssim: ssim(first, hr, scale)?,
        lr_psnr,
        consistency: psnr(&sr_down, lr)?,
        diversity: diversity(sr_samples)?,
    })
}

impl MetricReport {
    /// Line-oriented `key=value` rendering. Labels which color space each
    /// PSNR uses.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "psnr_rgb={:.4}", self.psnr_rgb);
        let _ = writeln!(s, "psnr_y={:.4}", self.psnr_y);
        let _ = writeln!(s, "ssim={:.6}", self.ssim);
        if let Some(v) = self.lr_psnr {
            let _ = writeln!(s, "lr_psnr={v:.4}");
        }
        let _ = writeln!(s, "consistency={:.4}", self.consistency);
        let _ = writeln!(s, "diversity={:.6}", self.diversity);
        s
    }

    /// Flat JSON object, metric name → number.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{");
        let _ = write!(s, "\"psnr_rgb\":{:.4},", self.psnr_rgb);
        let _ = write!(s, "\"psnr_y\":{:.4},", self.psnr_y);
        let _ = write!(s, "\"ssim\":{:.6},", self.ssim);
        if let Some(v) = self.lr_psnr {
            let _ = write!(s, "\"lr_psnr\":{v:.4},");
        }
        let _ = write!(s, "\"consistency\":{:.4},", self.consistency);
        let _ = write!(s, "\"diversity\":{:.6}", self.diversity);
        s.push('}');
        s
    }
}
