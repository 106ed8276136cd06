//! Structured compute kernels shared by the autodiff graph.
//!
//! Convolutions walk contiguous rows with a scalar-times-slice inner loop so
//! the compiler can vectorize them; reductions accumulate in f64 regardless
//! of the storage precision.

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::{Shape4, Tensor};

// ── convolution ──────────────────────────────────────────────────────────

/// Checks a conv weight/input pairing and returns (pad_h, pad_w).
pub fn conv2d_check<R: Real>(x: &Tensor<R>, w: &Tensor<R>) -> Result<(usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.h % 2 == 0 || ws.w % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel dims must be odd, got {}x{}", ws.h, ws.w),
        ));
    }
    if ws.c != xs.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {} input channels, input has {}",
                ws.c, xs.c
            ),
        ));
    }
    Ok(((ws.h - 1) / 2, (ws.w - 1) / 2))
}

/// One image's planes copied into rows padded with `pad_w` zeros on both
/// sides, so every kernel tap reads a full-width slice with no boundary
/// branches.
struct PaddedItem<R: Real> {
    buf: Vec<R>,
    wp: usize,
    h: usize,
}

impl<R: Real> PaddedItem<R> {
    fn new(x: &Tensor<R>, b: usize, pad_w: usize) -> Self {
        let s = x.shape();
        let wp = s.w + 2 * pad_w;
        let mut buf = vec![R::ZERO; s.c * s.h * wp];
        for c in 0..s.c {
            for y in 0..s.h {
                let dst = &mut buf[(c * s.h + y) * wp + pad_w..(c * s.h + y) * wp + pad_w + s.w];
                dst.copy_from_slice(x.row(b, c, y));
            }
        }
        PaddedItem { buf, wp, h: s.h }
    }

    #[inline]
    fn row(&self, c: usize, y: usize) -> &[R] {
        &self.buf[(c * self.h + y) * self.wp..(c * self.h + y + 1) * self.wp]
    }
}

/// Zero-padded stride-1 convolution. `w` is (out_ch, in_ch, kh, kw) packed in
/// a `Tensor`; `bias` holds one value per output channel (shape (1,OC,1,1)).
pub fn conv2d<R: Real>(x: &Tensor<R>, w: &Tensor<R>, bias: Option<&Tensor<R>>) -> Result<Tensor<R>> {
    let (pad_h, pad_w) = conv2d_check(x, w)?;
    let (xs, ws) = (x.shape(), w.shape());
    let os = Shape4::new(xs.b, ws.b, xs.h, xs.w);
    let mut out = Tensor::zeros(os);
    for b in 0..xs.b {
        let padded = PaddedItem::new(x, b, pad_w);
        for oc in 0..ws.b {
            let bv = bias.map_or(R::ZERO, |t| t.data()[oc]);
            for oy in 0..xs.h {
                let orow = out.row_mut(b, oc, oy);
                if bv != R::ZERO {
                    for o in orow.iter_mut() {
                        *o = bv;
                    }
                }
                for ky in 0..ws.h {
                    let iy = oy as isize + ky as isize - pad_h as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for ic in 0..xs.c {
                        let prow = padded.row(ic, iy as usize);
                        let wrow = w.row(oc, ic, ky);
                        // out[x] += Σ_kx wrow[kx] · padded[x + kx]
                        match ws.w {
                            1 => {
                                let w0 = wrow[0];
                                for (o, p) in orow.iter_mut().zip(&prow[..xs.w]) {
                                    *o += w0 * *p;
                                }
                            }
                            3 => {
                                let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                                let (p0, p1, p2) =
                                    (&prow[..xs.w], &prow[1..xs.w + 1], &prow[2..xs.w + 2]);
                                for i in 0..xs.w {
                                    orow[i] += w0 * p0[i] + w1 * p1[i] + w2 * p2[i];
                                }
                            }
                            _ => {
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    if wv == R::ZERO {
                                        continue;
                                    }
                                    let src = &prow[kx..kx + xs.w];
                                    for (o, s) in orow.iter_mut().zip(src) {
                                        *o += wv * *s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` with respect to its input: a same-padded convolution
/// of the output gradient with the kernel flipped spatially and transposed in
/// its channel axes (exact for the odd kernels `conv2d` accepts).
pub fn conv2d_grad_input<R: Real>(gy: &Tensor<R>, w: &Tensor<R>, xs: Shape4) -> Tensor<R> {
    let ws = w.shape();
    let wt = Tensor::from_fn(Shape4::new(ws.c, ws.b, ws.h, ws.w), |ic, oc, ky, kx| {
        w.at(oc, ic, ws.h - 1 - ky, ws.w - 1 - kx)
    });
    let gx = conv2d(gy, &wt, None).expect("grad kernel shape derived from forward");
    debug_assert_eq!(gx.shape(), xs);
    gx
}

/// Shifted dot product with four independent partial sums so the reduction
/// vectorizes; the order is fixed, so results stay deterministic.
#[inline]
fn dot4<R: Real>(a: &[R], b: &[R]) -> R {
    let mut parts = [R::ZERO; 4];
    let mut chunks = a.chunks_exact(4).zip(b.chunks_exact(4));
    for (ac, bc) in &mut chunks {
        parts[0] += ac[0] * bc[0];
        parts[1] += ac[1] * bc[1];
        parts[2] += ac[2] * bc[2];
        parts[3] += ac[3] * bc[3];
    }
    let mut dot = (parts[0] + parts[2]) + (parts[1] + parts[3]);
    let rem = a.len() - a.len() % 4;
    for (av, bv) in a[rem..].iter().zip(&b[rem..]) {
        dot += *av * *bv;
    }
    dot
}

/// Gradient of `conv2d` with respect to the kernel; accumulated in f64.
pub fn conv2d_grad_weight<R: Real>(x: &Tensor<R>, gy: &Tensor<R>, ws: Shape4) -> Tensor<R> {
    let xs = x.shape();
    let (pad_h, pad_w) = ((ws.h - 1) / 2, (ws.w - 1) / 2);
    let mut acc = vec![0.0f64; ws.numel()];
    let widx = |oc: usize, ic: usize, ky: usize, kx: usize| {
        ((oc * ws.c + ic) * ws.h + ky) * ws.w + kx
    };
    for b in 0..xs.b {
        let padded = PaddedItem::new(x, b, pad_w);
        for oc in 0..ws.b {
            for oy in 0..xs.h {
                let gorow = gy.row(b, oc, oy);
                for ky in 0..ws.h {
                    let iy = oy as isize + ky as isize - pad_h as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for ic in 0..xs.c {
                        let prow = padded.row(ic, iy as usize);
                        for kx in 0..ws.w {
                            let dot = dot4(gorow, &prow[kx..kx + xs.w]);
                            acc[widx(oc, ic, ky, kx)] += dot.to_f64();
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(ws, acc.into_iter().map(R::from_f64).collect())
}

/// Gradient of `conv2d` with respect to the bias: per-out-channel sum.
pub fn conv2d_grad_bias<R: Real>(gy: &Tensor<R>) -> Tensor<R> {
    let s = gy.shape();
    let mut acc = vec![0.0f64; s.c];
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for v in gy.row(b, c, y) {
                    acc[c] += v.to_f64();
                }
            }
        }
    }
    Tensor::from_raw(
        Shape4::new(1, s.c, 1, 1),
        acc.into_iter().map(R::from_f64).collect(),
    )
}

// ── per-pixel channel mixing (invertible 1×1 convolution) ───────────────

/// Applies a CxC matrix to every pixel's channel vector:
/// out[b,j,·] = Σ_i m[j,i]·x[b,i,·]. `m` is row-major CxC.
pub fn matmul_pixels<R: Real>(x: &Tensor<R>, m: &[f64]) -> Tensor<R> {
    let s = x.shape();
    debug_assert_eq!(m.len(), s.c * s.c);
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(s);
    for b in 0..s.b {
        for j in 0..s.c {
            let obase = out.index(b, j, 0, 0);
            for i in 0..s.c {
                let mv = R::from_f64(m[j * s.c + i]);
                if mv == R::ZERO {
                    continue;
                }
                let ibase = x.index(b, i, 0, 0);
                let src = &x.data()[ibase..ibase + plane];
                let dst = &mut out.data_mut()[obase..obase + plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += mv * *s;
                }
            }
        }
    }
    out
}

/// Gradient of `matmul_pixels` with respect to the matrix:
/// gm[j,i] = Σ_{b,pixels} gy[b,j,·]·x[b,i,·]. Returned row-major, f64.
pub fn matmul_pixels_grad_mat<R: Real>(x: &Tensor<R>, gy: &Tensor<R>) -> Vec<f64> {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut gm = vec![0.0f64; s.c * s.c];
    for b in 0..s.b {
        for j in 0..s.c {
            let gbase = gy.index(b, j, 0, 0);
            let grow = &gy.data()[gbase..gbase + plane];
            for i in 0..s.c {
                let ibase = x.index(b, i, 0, 0);
                let xrow = &x.data()[ibase..ibase + plane];
                let mut dot = R::ZERO;
                for (g, v) in grow.iter().zip(xrow) {
                    dot += *g * *v;
                }
                gm[j * s.c + i] += dot.to_f64();
            }
        }
    }
    gm
}

// ── squeeze / Haar ───────────────────────────────────────────────────────

/// Space-to-depth: (B,C,H,W) → (B,4C,H/2,W/2). Output channel
/// (2·dy + dx)·C + c holds input channel c at sub-position (dy,dx).
pub fn squeeze2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::OddSpatial { h: s.h, w: s.w });
    }
    let os = Shape4::new(s.b, 4 * s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    for b in 0..s.b {
        for c in 0..s.c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = (2 * dy + dx) * s.c + c;
                    for oy in 0..os.h {
                        let irow = x.row(b, c, 2 * oy + dy);
                        let orow = out.row_mut(b, oc, oy);
                        for ox in 0..os.w {
                            orow[ox] = irow[2 * ox + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depth-to-space inverse of [`squeeze2`].
pub fn unsqueeze2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let s = x.shape();
    if s.c % 4 != 0 {
        return Err(Error::shape(
            "unsqueeze",
            format!("channels {} not divisible by 4", s.c),
        ));
    }
    let os = Shape4::new(s.b, s.c / 4, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(os);
    for b in 0..s.b {
        for c in 0..os.c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = (2 * dy + dx) * os.c + c;
                    for iy in 0..s.h {
                        let irow = x.row(b, ic, iy);
                        let orow = out.row_mut(b, c, 2 * iy + dy);
                        for ix in 0..s.w {
                            orow[2 * ix + dx] = irow[ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Orthonormal 2×2 Haar analysis: (B,C,H,W) → (B,4C,H/2,W/2) with bands
/// ordered LL, LH (horizontal detail), HL (vertical detail), HH. Each band
/// coefficient is (±a ±b ±c ±d)/2, an orthonormal involution per block.
pub fn haar2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::OddSpatial { h: s.h, w: s.w });
    }
    let half = R::from_f64(0.5);
    let os = Shape4::new(s.b, 4 * s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    // Band k of channel c lives at output channel c + k·C, i.e. a fixed
    // offset of k·(C·h·w) elements from the LL position within one item.
    let band = s.c * os.h * os.w;
    for b in 0..s.b {
        for c in 0..s.c {
            for oy in 0..os.h {
                let top_start = x.index(b, c, 2 * oy, 0);
                let bot_start = x.index(b, c, 2 * oy + 1, 0);
                for ox in 0..os.w {
                    let a = x.data()[top_start + 2 * ox];
                    let bb = x.data()[top_start + 2 * ox + 1];
                    let cc = x.data()[bot_start + 2 * ox];
                    let d = x.data()[bot_start + 2 * ox + 1];
                    let base = out.index(b, c, oy, ox);
                    let o = out.data_mut();
                    o[base] = (a + bb + cc + d) * half;
                    o[base + band] = (a - bb + cc - d) * half;
                    o[base + 2 * band] = (a + bb - cc - d) * half;
                    o[base + 3 * band] = (a - bb - cc + d) * half;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`haar2`]: (B,4C,H,W) → (B,C,2H,2W).
pub fn haar2_inverse<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let s = x.shape();
    if s.c % 4 != 0 {
        return Err(Error::shape(
            "haar_inverse",
            format!("channels {} not divisible by 4", s.c),
        ));
    }
    let half = R::from_f64(0.5);
    let os = Shape4::new(s.b, s.c / 4, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(os);
    let band = os.c * s.h * s.w;
    for b in 0..s.b {
        for c in 0..os.c {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let base = x.index(b, c, iy, ix);
                    let ll = x.data()[base];
                    let lh = x.data()[base + band];
                    let hl = x.data()[base + 2 * band];
                    let hh = x.data()[base + 3 * band];
                    let a = (ll + lh + hl + hh) * half;
                    let bb = (ll - lh + hl - hh) * half;
                    let cc = (ll + lh - hl - hh) * half;
                    let d = (ll - lh - hl + hh) * half;
                    out.set(b, c, 2 * iy, 2 * ix, a);
                    out.set(b, c, 2 * iy, 2 * ix + 1, bb);
                    out.set(b, c, 2 * iy + 1, 2 * ix, cc);
                    out.set(b, c, 2 * iy + 1, 2 * ix + 1, d);
                }
            }
        }
    }
    Ok(out)
}

// ── resampling ───────────────────────────────────────────────────────────

/// Nearest-neighbour ×2 upsampling by pixel replication.
pub fn upsample2<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let s = x.shape();
    let os = Shape4::new(s.b, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(os);
    for b in 0..s.b {
        for c in 0..s.c {
            for iy in 0..s.h {
                let irow = x.row(b, c, iy);
                for dy in 0..2 {
                    let orow = out.row_mut(b, c, 2 * iy + dy);
                    for ix in 0..s.w {
                        orow[2 * ix] = irow[ix];
                        orow[2 * ix + 1] = irow[ix];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block (gradient path).
pub fn downsum2<R: Real>(g: &Tensor<R>) -> Tensor<R> {
    let s = g.shape();
    debug_assert!(s.h % 2 == 0 && s.w % 2 == 0);
    let os = Shape4::new(s.b, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    for b in 0..s.b {
        for c in 0..s.c {
            for oy in 0..os.h {
                let top = g.row(b, c, 2 * oy);
                let bot = g.row(b, c, 2 * oy + 1);
                let orow = out.row_mut(b, c, oy);
                for ox in 0..os.w {
                    orow[ox] = top[2 * ox] + top[2 * ox + 1] + bot[2 * ox] + bot[2 * ox + 1];
                }
            }
        }
    }
    out
}

// ── channel concat / slice ───────────────────────────────────────────────

pub fn concat_channels<R: Real>(parts: &[&Tensor<R>]) -> Result<Tensor<R>> {
    if parts.is_empty() {
        return Err(Error::shape("channel_concat", "no inputs"));
    }
    let first = parts[0].shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.b != first.b || s.h != first.h || s.w != first.w {
            return Err(Error::shape(
                "channel_concat",
                format!("incompatible shapes {} vs {}", first, s),
            ));
        }
        c_total += s.c;
    }
    let os = Shape4::new(first.b, c_total, first.h, first.w);
    let mut out = Tensor::zeros(os);
    let plane = first.h * first.w;
    for b in 0..first.b {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape().c;
            let src = &p.data()[b * pc * plane..(b + 1) * pc * plane];
            let dst_start = (b * c_total + c_off) * plane;
            out.data_mut()[dst_start..dst_start + pc * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    Ok(out)
}

/// Channels [lo, hi) of `x`.
pub fn slice_channels<R: Real>(x: &Tensor<R>, lo: usize, hi: usize) -> Result<Tensor<R>> {
    let s = x.shape();
    if lo >= hi || hi > s.c {
        return Err(Error::shape(
            "channel_split",
            format!("slice [{lo},{hi}) out of range for {} channels", s.c),
        ));
    }
    let os = Shape4::new(s.b, hi - lo, s.h, s.w);
    let mut out = Tensor::zeros(os);
    let plane = s.h * s.w;
    for b in 0..s.b {
        let src_start = (b * s.c + lo) * plane;
        let dst_start = b * (hi - lo) * plane;
        out.data_mut()[dst_start..dst_start + (hi - lo) * plane]
            .copy_from_slice(&x.data()[src_start..src_start + (hi - lo) * plane]);
    }
    Ok(out)
}

/// Adds `g` into channels [lo, lo + g.c) of `acc` (concat/slice gradients).
pub fn scatter_channels_add<R: Real>(acc: &mut Tensor<R>, g: &Tensor<R>, lo: usize) {
    let s = acc.shape();
    let gs = g.shape();
    debug_assert!(lo + gs.c <= s.c && s.b == gs.b && s.h == gs.h && s.w == gs.w);
    let plane = s.h * s.w;
    for b in 0..s.b {
        let dst_start = (b * s.c + lo) * plane;
        let src_start = b * gs.c * plane;
        let dst = &mut acc.data_mut()[dst_start..dst_start + gs.c * plane];
        let src = &g.data()[src_start..src_start + gs.c * plane];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
}

// ── per-channel reductions (actnorm / bias gradients) ────────────────────

/// Per-channel sum over batch and space, f64-accumulated, shape (1,C,1,1).
pub fn channel_sum<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    let s = t.shape();
    let mut acc = vec![0.0f64; s.c];
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for v in t.row(b, c, y) {
                    acc[c] += v.to_f64();
                }
            }
        }
    }
    Tensor::from_raw(
        Shape4::new(1, s.c, 1, 1),
        acc.into_iter().map(R::from_f64).collect(),
    )
}

/// Per-channel sum of a·b over batch and space, shape (1,C,1,1).
pub fn channel_dot<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let s = a.shape();
    debug_assert!(a.same_shape(b));
    let mut acc = vec![0.0f64; s.c];
    for bi in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                let ra = a.row(bi, c, y);
                let rb = b.row(bi, c, y);
                let mut dot = R::ZERO;
                for (x, z) in ra.iter().zip(rb) {
                    dot += *x * *z;
                }
                acc[c] += dot.to_f64();
            }
        }
    }
    Tensor::from_raw(
        Shape4::new(1, s.c, 1, 1),
        acc.into_iter().map(R::from_f64).collect(),
    )
}
