//! Individual invertible layers: squeeze, actnorm, invertible 1×1
//! channel mixing, affine coupling (optionally conditional), and channel split.

use crate::conditioner::CouplingHead;
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore, PassCtx};
use crate::numerics::real::Real;
use crate::numerics::rng::SplitMix64;
use crate::numerics::tensor::{Shape4, Tensor, Tensor4};

/// σ(2); couplings normalize their scale map by this so a zero-initialized
/// head yields scale exactly 1 (identity transform).
const SIGMOID_2: f64 = 0.8807970779778823;

/// Scales below this are treated as collapsed (non-invertible) actnorm.
const SCALE_FLOOR: f32 = 1e-20;

/// Channel-count floor used during data-dependent init so constant channels
/// do not produce unbounded scales.
const STD_FLOOR: f64 = 1e-6;

fn check_channels<R: Real>(
    op: &'static str,
    g: &Graph<R>,
    x: Var,
    expected: usize,
) -> Result<()> {
    let got = g.shape(x).c;
    if got != expected {
        return Err(Error::shape(
            op,
            format!("expected {expected} channels, got {got}"),
        ));
    }
    Ok(())
}

// ─── squeeze ─────────────────────────────────────────────────────────────────

/// How a level trades spatial size for channels. Both variants are volume
/// preserving (log-det 0): space-to-channel is a permutation, the Haar
/// transform is orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqueezeKind {
    /// 2×2 space-to-channel rearrangement.
    Space,
    /// Orthonormal 2×2 Haar wavelet: low-pass band first, then the three
    /// detail bands.
    Haar,
}

impl SqueezeKind {
    pub fn forward<R: Real>(self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        match self {
            SqueezeKind::Space => g.squeeze2(x),
            SqueezeKind::Haar => g.haar_fwd(x),
        }
    }

    pub fn inverse<R: Real>(self, g: &mut Graph<R>, y: Var) -> Result<Var> {
        match self {
            SqueezeKind::Space => g.unsqueeze2(y),
            SqueezeKind::Haar => g.haar_inv(y),
        }
    }
}

// ─── actnorm ─────────────────────────────────────────────────────────────────

/// Per-channel affine normalization: forward is `(h + bias) · scale`.
///
/// Scale and bias start at identity and are replaced on the first training
/// batch (when the pass runs with `actnorm_init`) so that post-layer
/// activations have zero mean and unit variance per channel; afterwards both
/// are ordinary trainable parameters.
pub struct ActNorm {
    scale: ParamId,
    bias: ParamId,
    pub channels: usize,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let shape = Shape4::new(1, channels, 1, 1);
        let scale = store.register(format!("{name}/scale"), Tensor4::full(shape, 1.0))?;
        let bias = store.register(format!("{name}/bias"), Tensor4::zeros(shape))?;
        Ok(ActNorm {
            scale,
            bias,
            channels,
        })
    }

    fn check_scale(&self, store: &ParamStore) -> Result<()> {
        for (c, &s) in store.value(self.scale).data().iter().enumerate() {
            if s.abs() < SCALE_FLOOR {
                return Err(Error::ZeroScale { channel: c });
            }
        }
        Ok(())
    }

    /// Replaces scale/bias with statistics of the incoming activation so the
    /// output has per-channel mean 0 and standard deviation 1.
    fn init_from_activation<R: Real>(&self, ctx: &mut PassCtx<R>, x: Var) {
        let (scale_t, bias_t) = {
            let t = ctx.g.data(x);
            let s = t.shape();
            let plane = s.h * s.w;
            let n = (s.b * plane) as f64;
            let data = t.data();
            let mut scale = Vec::with_capacity(s.c);
            let mut bias = Vec::with_capacity(s.c);
            for c in 0..s.c {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for b in 0..s.b {
                    let start = (b * s.c + c) * plane;
                    for &v in &data[start..start + plane] {
                        let v = v.to_f64();
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                let std = var.sqrt().max(STD_FLOOR);
                scale.push((1.0 / std) as f32);
                bias.push((-mean) as f32);
            }
            let shape = Shape4::new(1, s.c, 1, 1);
            (
                Tensor4::from_vec(shape, scale).expect("stat vector matches channel count"),
                Tensor4::from_vec(shape, bias).expect("stat vector matches channel count"),
            )
        };
        // shapes are preserved, so set() cannot fail
        ctx.store
            .set(self.scale, scale_t)
            .expect("actnorm scale shape is fixed");
        ctx.store
            .set(self.bias, bias_t)
            .expect("actnorm bias shape is fixed");
        ctx.rebind(self.scale);
        ctx.rebind(self.bias);
    }

    /// `sign · H·W · Σ_c ln|scale_c|` added onto the per-item accumulator,
    /// differentiable with respect to the scale.
    fn bump_logdet<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        x: Var,
        ld: Var,
        sign: f64,
    ) -> Result<Var> {
        let s = ctx.var(self.scale);
        let a = ctx.g.abs(s);
        let l = ctx.g.ln(a);
        let tot = ctx.g.sum(l);
        let sx = ctx.g.shape(x);
        let d = ctx.g.mul_scalar(tot, sign * (sx.h * sx.w) as f64);
        ctx.g.add_scalar_var(ld, d)
    }

    pub fn forward<R: Real>(&self, ctx: &mut PassCtx<R>, x: Var, ld: Var) -> Result<(Var, Var)> {
        check_channels("actnorm", ctx.g, x, self.channels)?;
        if ctx.actnorm_init {
            self.init_from_activation(ctx, x);
        }
        self.check_scale(ctx.store)?;
        let s = ctx.var(self.scale);
        let b = ctx.var(self.bias);
        let shifted = ctx.g.add_channel(x, b)?;
        let y = ctx.g.mul_channel(shifted, s)?;
        if ctx.actnorm_trace.is_some() {
            let name = ctx
                .store
                .name(self.scale)
                .trim_end_matches("/scale")
                .to_string();
            ctx.actnorm_trace.as_mut().unwrap().push((name, y));
        }
        let ld = self.bump_logdet(ctx, x, ld, 1.0)?;
        Ok((y, ld))
    }

    pub fn inverse<R: Real>(&self, ctx: &mut PassCtx<R>, y: Var, ld: Var) -> Result<(Var, Var)> {
        check_channels("actnorm", ctx.g, y, self.channels)?;
        self.check_scale(ctx.store)?;
        let s = ctx.var(self.scale);
        let b = ctx.var(self.bias);
        let ones = ctx
            .g
            .constant(Tensor::full(Shape4::new(1, self.channels, 1, 1), R::ONE));
        let recip = ctx.g.div(ones, s)?;
        let scaled = ctx.g.mul_channel(y, recip)?;
        let nb = ctx.g.neg(b);
        let x = ctx.g.add_channel(scaled, nb)?;
        let ld = self.bump_logdet(ctx, y, ld, -1.0)?;
        Ok((x, ld))
    }
}

// ─── invertible 1×1 convolution ──────────────────────────────────────────────

/// Learned channel mixing: every pixel's channel vector is multiplied by a
/// square matrix W (initialized to identity). Log-det per item is
/// `H·W·log|det W|`; the inverse applies W⁻¹ computed at call time and fails
/// with a structured error when W is numerically singular.
pub struct Inv1x1 {
    w: ParamId,
    pub channels: usize,
}

impl Inv1x1 {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let eye = Tensor4::from_fn(Shape4::new(channels, channels, 1, 1), |o, i, _, _| {
            if o == i {
                1.0
            } else {
                0.0
            }
        });
        let w = store.register(format!("{name}/w"), eye)?;
        Ok(Inv1x1 { w, channels })
    }

    fn bump_logdet<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        x: Var,
        ld: Var,
        sign: f64,
    ) -> Result<Var> {
        let w = ctx.var(self.w);
        let ldm = ctx.g.logdet_mat(w)?;
        let sx = ctx.g.shape(x);
        let d = ctx.g.mul_scalar(ldm, sign * (sx.h * sx.w) as f64);
        ctx.g.add_scalar_var(ld, d)
    }

    pub fn forward<R: Real>(&self, ctx: &mut PassCtx<R>, x: Var, ld: Var) -> Result<(Var, Var)> {
        check_channels("invertible_1x1", ctx.g, x, self.channels)?;
        let w = ctx.var(self.w);
        let y = ctx.g.matpix(x, w, false)?;
        let ld = self.bump_logdet(ctx, x, ld, 1.0)?;
        Ok((y, ld))
    }

    pub fn inverse<R: Real>(&self, ctx: &mut PassCtx<R>, y: Var, ld: Var) -> Result<(Var, Var)> {
        check_channels("invertible_1x1", ctx.g, y, self.channels)?;
        let w = ctx.var(self.w);
        let x = ctx.g.matpix(y, w, true)?;
        let ld = self.bump_logdet(ctx, y, ld, -1.0)?;
        Ok((x, ld))
    }
}

// ─── affine coupling ─────────────────────────────────────────────────────────

/// Affine coupling: the first ⌊C/2⌋ channels pass through unchanged and drive
/// a head network (optionally concatenated with external conditioning
/// features) that produces per-element scale and shift for the rest:
///
///   y_b = x_b · s + t,  s = sigmoid(raw + 2) / sigmoid(2)
///
/// The normalization makes a zero-initialized head an exact identity, and
/// keeps s in (0, ~1.135) so both directions stay well conditioned. Log-det
/// per item is Σ ln s over the transformed half.
pub struct AffineCoupling {
    head: CouplingHead,
    pub ch_a: usize,
    pub ch_b: usize,
    /// Channel count of required external conditioning features, if any.
    pub cond_ch: Option<usize>,
}

impl AffineCoupling {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_ch: Option<usize>,
        head_width: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::invalid(
                "affine_coupling",
                format!("needs at least 2 channels, got {channels}"),
            ));
        }
        if cond_ch == Some(0) {
            return Err(Error::invalid(
                "affine_coupling",
                "conditional coupling needs at least 1 conditioning channel",
            ));
        }
        let ch_a = channels / 2;
        let ch_b = channels - ch_a;
        let head_in = ch_a + cond_ch.unwrap_or(0);
        let head = CouplingHead::new(store, &format!("{name}/head"), head_in, ch_b, head_width, rng)?;
        Ok(AffineCoupling {
            head,
            ch_a,
            ch_b,
            cond_ch,
        })
    }

    pub fn channels(&self) -> usize {
        self.ch_a + self.ch_b
    }

    /// Scale (strictly positive) and shift tensors shaped like the
    /// transformed half, derived from the passthrough half and optional
    /// conditioning features.
    fn scale_shift<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        xa: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let head_in = match (cond, self.cond_ch) {
            (None, None) => xa,
            (Some(c), Some(expect)) => {
                let (sa, sc) = (ctx.g.shape(xa), ctx.g.shape(c));
                if sc.c != expect {
                    return Err(Error::shape(
                        "conditional_coupling",
                        format!("expected {expect} conditioning channels, got {}", sc.c),
                    ));
                }
                if sc.b != sa.b || sc.h != sa.h || sc.w != sa.w {
                    return Err(Error::shape(
                        "conditional_coupling",
                        format!("conditioning features {sc} do not align with input {sa}"),
                    ));
                }
                ctx.g.concat_channels(&[xa, c])?
            }
            (Some(_), None) => {
                return Err(Error::invalid(
                    "affine_coupling",
                    "unconditional coupling received conditioning features",
                ))
            }
            (None, Some(_)) => {
                return Err(Error::invalid(
                    "affine_coupling",
                    "conditional coupling requires conditioning features",
                ))
            }
        };
        let (raw, shift) = self.head.apply(ctx, head_in)?;
        let r2 = ctx.g.add_scalar(raw, 2.0);
        let sg = ctx.g.sigmoid(r2);
        let scale = ctx.g.mul_scalar(sg, 1.0 / SIGMOID_2);
        Ok((scale, shift))
    }

    pub fn forward<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        x: Var,
        cond: Option<Var>,
        ld: Var,
    ) -> Result<(Var, Var)> {
        check_channels("affine_coupling", ctx.g, x, self.channels())?;
        let xa = ctx.g.slice_channels(x, 0, self.ch_a)?;
        let xb = ctx.g.slice_channels(x, self.ch_a, self.channels())?;
        let (s, t) = self.scale_shift(ctx, xa, cond)?;
        let scaled = ctx.g.mul(xb, s)?;
        let yb = ctx.g.add(scaled, t)?;
        let y = ctx.g.concat_channels(&[xa, yb])?;
        let lns = ctx.g.ln(s);
        let d = ctx.g.sum_items(lns);
        let ld = ctx.g.add(ld, d)?;
        Ok((y, ld))
    }

    pub fn inverse<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        y: Var,
        cond: Option<Var>,
        ld: Var,
    ) -> Result<(Var, Var)> {
        check_channels("affine_coupling", ctx.g, y, self.channels())?;
        let ya = ctx.g.slice_channels(y, 0, self.ch_a)?;
        let yb = ctx.g.slice_channels(y, self.ch_a, self.channels())?;
        let (s, t) = self.scale_shift(ctx, ya, cond)?;
        let shifted = ctx.g.sub(yb, t)?;
        let xb = ctx.g.div(shifted, s)?;
        let x = ctx.g.concat_channels(&[ya, xb])?;
        let lns = ctx.g.ln(s);
        let d = ctx.g.sum_items(lns);
        let ld = ctx.g.sub(ld, d)?;
        Ok((x, ld))
    }
}

// ─── split ───────────────────────────────────────────────────────────────────

/// Splits channels into (kept, factored-out) halves; inverse is channel
/// concatenation in the same order.
pub fn split_channels<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    keep: usize,
) -> Result<(Var, Var)> {
    let c = g.shape(x).c;
    if keep == 0 || keep >= c {
        return Err(Error::invalid(
            "split",
            format!("keep count {keep} out of range for {c} channels"),
        ));
    }
    let kept = g.slice_channels(x, 0, keep)?;
    let rest = g.slice_channels(x, keep, c)?;
    Ok((kept, rest))
}
