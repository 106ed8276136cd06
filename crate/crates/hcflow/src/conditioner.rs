//! Non-invertible conditioning networks: residual feature extractors φ_l and
//! the coupling-head networks that turn features into per-element scale and
//! shift. These participate in gradients but contribute no log-determinant —
//! invertibility of the host coupling never depends on inverting them.

use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::params::{ParamId, ParamStore, PassCtx};
use crate::numerics::real::Real;
use crate::numerics::rng::SplitMix64;
use crate::numerics::tensor::{Shape4, Tensor4};

/// Weight initialization for a convolution.
#[derive(Debug, Clone, Copy)]
pub enum ConvInit {
    /// All-zero weights and bias (identity-coupling contract).
    Zero,
    /// Gaussian with std = gain / √fan_in.
    Scaled(f64),
}

/// One convolution layer: weight + bias parameters and the shape contract.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    w: ParamId,
    b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        init: ConvInit,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let ws = Shape4::new(out_ch, in_ch, k, k);
        let weight = match init {
            ConvInit::Zero => Tensor4::zeros(ws),
            ConvInit::Scaled(gain) => {
                let std = gain / ((in_ch * k * k) as f64).sqrt();
                Tensor4::from_fn(ws, |_, _, _, _| (rng.normal() * std) as f32)
            }
        };
        let w = store.register(format!("{name}/w"), weight)?;
        let b = store.register(format!("{name}/b"), Tensor4::zeros(Shape4::new(1, out_ch, 1, 1)))?;
        Ok(ConvLayer {
            w,
            b,
            in_ch,
            out_ch,
            k,
        })
    }

    pub fn apply<R: Real>(&self, ctx: &mut PassCtx<R>, x: Var) -> Result<Var> {
        let got = ctx.g.shape(x).c;
        if got != self.in_ch {
            return Err(Error::shape(
                "conv_layer",
                format!("expected {} input channels, got {got}", self.in_ch),
            ));
        }
        let w = ctx.var(self.w);
        let b = ctx.var(self.b);
        ctx.g.conv2d(x, w, b)
    }
}

/// Residual feature extractor: input projection, `n_blocks` residual units of
/// two 3×3 convolutions with a relu between and a 0.2-scaled skip, and an
/// output projection. Spatial size is preserved throughout.
pub struct ResidualConditioner {
    in_proj: ConvLayer,
    blocks: Vec<(ConvLayer, ConvLayer)>,
    out_proj: ConvLayer,
    pub in_ch: usize,
    pub width: usize,
}

impl ResidualConditioner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        width: usize,
        n_blocks: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let in_proj = ConvLayer::new(
            store,
            &format!("{name}/in_proj"),
            in_ch,
            width,
            3,
            ConvInit::Scaled(1.0),
            rng,
        )?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let c1 = ConvLayer::new(
                store,
                &format!("{name}/block{i}/c1"),
                width,
                width,
                3,
                ConvInit::Scaled(std::f64::consts::SQRT_2),
                rng,
            )?;
            let c2 = ConvLayer::new(
                store,
                &format!("{name}/block{i}/c2"),
                width,
                width,
                3,
                ConvInit::Scaled(1.0),
                rng,
            )?;
            blocks.push((c1, c2));
        }
        let out_proj = ConvLayer::new(
            store,
            &format!("{name}/out_proj"),
            width,
            width,
            3,
            ConvInit::Scaled(1.0),
            rng,
        )?;
        Ok(ResidualConditioner {
            in_proj,
            blocks,
            out_proj,
            in_ch,
            width,
        })
    }

    /// Feature map of configured width, same spatial size as the input.
    pub fn apply<R: Real>(&self, ctx: &mut PassCtx<R>, x: Var) -> Result<Var> {
        let got = ctx.g.shape(x).c;
        if got != self.in_ch {
            return Err(Error::shape(
                "extract_features",
                format!("conditioner expects {} input channels, got {got}", self.in_ch),
            ));
        }
        let mut h = self.in_proj.apply(ctx, x)?;
        for (c1, c2) in &self.blocks {
            let t = c1.apply(ctx, h)?;
            let t = ctx.g.relu(t);
            let t = c2.apply(ctx, t)?;
            let t = ctx.g.mul_scalar(t, 0.2);
            h = ctx.g.add(h, t)?;
        }
        self.out_proj.apply(ctx, h)
    }
}

/// Coupling head: 3×3 conv → relu → 1×1 conv → relu → zero-initialized 3×3
/// conv emitting 2·out_ch channels, split into (scale_raw, shift). The zero
/// final layer makes a freshly initialized coupling the identity.
pub struct CouplingHead {
    c1: ConvLayer,
    c2: ConvLayer,
    c3: ConvLayer,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl CouplingHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        width: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let c1 = ConvLayer::new(
            store,
            &format!("{name}/c1"),
            in_ch,
            width,
            3,
            ConvInit::Scaled(std::f64::consts::SQRT_2),
            rng,
        )?;
        let c2 = ConvLayer::new(
            store,
            &format!("{name}/c2"),
            width,
            width,
            1,
            ConvInit::Scaled(std::f64::consts::SQRT_2),
            rng,
        )?;
        let c3 = ConvLayer::new(
            store,
            &format!("{name}/c3"),
            width,
            2 * out_ch,
            3,
            ConvInit::Zero,
            rng,
        )?;
        Ok(CouplingHead {
            c1,
            c2,
            c3,
            in_ch,
            out_ch,
        })
    }

    /// (scale_raw, shift), each shaped like the transformed half.
    pub fn apply<R: Real>(&self, ctx: &mut PassCtx<R>, x: Var) -> Result<(Var, Var)> {
        let got = ctx.g.shape(x).c;
        if got != self.in_ch {
            return Err(Error::shape(
                "coupling_head",
                format!("head expects {} input channels, got {got}", self.in_ch),
            ));
        }
        let h = self.c1.apply(ctx, x)?;
        let h = ctx.g.relu(h);
        let h = self.c2.apply(ctx, h)?;
        let h = ctx.g.relu(h);
        let o = self.c3.apply(ctx, h)?;
        let scale_raw = ctx.g.slice_channels(o, 0, self.out_ch)?;
        let shift = ctx.g.slice_channels(o, self.out_ch, 2 * self.out_ch)?;
        Ok((scale_raw, shift))
    }
}
