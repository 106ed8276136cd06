//! Invertible flow layers.
//!
//! Every layer exposes `forward` and `inverse` over a [`PassCtx`], threading a
//! per-batch-item log-determinant accumulator of shape (B,1,1,1). Forward adds
//! a layer's log-det contribution; inverse subtracts it, so a round trip
//! returns the accumulator unchanged. All layers are exactly invertible up to
//! floating-point rounding; conditioning networks feed couplings but never
//! need to be inverted themselves.

mod layers;
mod step;

pub use layers::{split_channels, ActNorm, AffineCoupling, Inv1x1, SqueezeKind};
pub use step::FlowStep;

use crate::numerics::graph::{Graph, Var};
use crate::numerics::real::Real;
use crate::numerics::tensor::{Shape4, Tensor};

/// Fresh per-item log-determinant accumulator, all zeros.
pub fn zero_logdet<R: Real>(g: &mut Graph<R>, batch: usize) -> Var {
    g.constant(Tensor::zeros(Shape4::new(batch, 1, 1, 1)))
}
