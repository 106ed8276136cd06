//! One flow step: actnorm → optional invertible 1×1 mixing → affine coupling.

use crate::error::Result;
use crate::flow::layers::{ActNorm, AffineCoupling, Inv1x1};
use crate::numerics::graph::Var;
use crate::numerics::params::{ParamStore, PassCtx};
use crate::numerics::real::Real;
use crate::numerics::rng::SplitMix64;

pub struct FlowStep {
    pub actnorm: ActNorm,
    pub mix: Option<Inv1x1>,
    pub coupling: AffineCoupling,
}

impl FlowStep {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_ch: Option<usize>,
        use_1x1: bool,
        head_width: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let actnorm = ActNorm::new(store, &format!("{name}/actnorm"), channels)?;
        let mix = if use_1x1 {
            Some(Inv1x1::new(store, &format!("{name}/mix"), channels)?)
        } else {
            None
        };
        let coupling = AffineCoupling::new(
            store,
            &format!("{name}/coupling"),
            channels,
            cond_ch,
            head_width,
            rng,
        )?;
        Ok(FlowStep {
            actnorm,
            mix,
            coupling,
        })
    }

    pub fn forward<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        x: Var,
        cond: Option<Var>,
        ld: Var,
    ) -> Result<(Var, Var)> {
        let (h, ld) = self.actnorm.forward(ctx, x, ld)?;
        let (h, ld) = match &self.mix {
            Some(m) => m.forward(ctx, h, ld)?,
            None => (h, ld),
        };
        self.coupling.forward(ctx, h, cond, ld)
    }

    pub fn inverse<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        y: Var,
        cond: Option<Var>,
        ld: Var,
    ) -> Result<(Var, Var)> {
        let (h, ld) = self.coupling.inverse(ctx, y, cond, ld)?;
        let (h, ld) = match &self.mix {
            Some(m) => m.inverse(ctx, h, ld)?,
            None => (h, ld),
        };
        self.actnorm.inverse(ctx, h, ld)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::zero_logdet;
    use crate::numerics::graph::Graph;
    use crate::numerics::tensor::{Shape4, Tensor4};

    fn randomized_step(
        channels: usize,
        cond_ch: Option<usize>,
        use_1x1: bool,
        seed: u64,
    ) -> (ParamStore, FlowStep, SplitMix64) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let step = FlowStep::new(&mut store, "s", channels, cond_ch, use_1x1, 8, &mut rng).unwrap();
        // perturb each layer away from the identity with magnitudes that keep
        // the coupling's scale map clear of sigmoid saturation on ±10 inputs
        for i in 0..store.len() {
            let id = store.id_at(i);
            let name = store.name(id).to_string();
            let cur = store.value(id).clone();
            let jitter: Box<dyn Fn(f32, &mut SplitMix64) -> f32> = if name.ends_with("actnorm/scale")
            {
                Box::new(|_, r| 0.7 + 0.6 * r.uniform() as f32)
            } else if name.ends_with("actnorm/bias") {
                Box::new(|_, r| 0.5 * r.normal() as f32)
            } else if name.ends_with("mix/w") {
                Box::new(|v, r| v + 0.1 * r.normal() as f32)
            } else if name.ends_with("head/c3/w") {
                Box::new(|_, r| 0.002 * r.normal() as f32)
            } else if name.ends_with("head/c3/b") {
                Box::new(|_, r| 0.05 * r.normal() as f32)
            } else {
                continue; // hidden head layers keep their fan-in scaled init
            };
            let jittered =
                Tensor4::from_fn(cur.shape(), |b, c, h, w| jitter(cur.at(b, c, h, w), &mut rng));
            store.set(id, jittered).unwrap();
        }
        (store, step, rng)
    }

    #[test]
    fn flow_step_round_trip_with_and_without_mixing() {
        for use_1x1 in [true, false] {
            let (mut store, step, mut rng) = randomized_step(6, None, use_1x1, 21);
            let xd = Tensor4::from_fn(Shape4::new(2, 6, 4, 4), |_, _, _, _| {
                rng.uniform_range(-10.0, 10.0) as f32
            });
            let mut g: Graph<f32> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut store, false);
            let x = ctx.g.constant(xd.clone());
            let ld0 = zero_logdet(ctx.g, 2);
            let (y, ld) = step.forward(&mut ctx, x, None, ld0).unwrap();
            let (x2, ld2) = step.inverse(&mut ctx, y, None, ld).unwrap();
            assert!(
                g.data(x2).max_abs_diff(&xd) < 1e-4,
                "use_1x1={use_1x1}: round trip error {}",
                g.data(x2).max_abs_diff(&xd)
            );
            for &v in g.data(ld2).data() {
                assert!(v.abs() < 1e-3, "use_1x1={use_1x1}: residual logdet {v}");
            }
        }
    }

    #[test]
    fn conditional_flow_step_round_trip() {
        let (mut store, step, mut rng) = randomized_step(4, Some(5), true, 22);
        let xd = Tensor4::from_fn(Shape4::new(1, 4, 4, 4), |_, _, _, _| {
            rng.uniform_range(-3.0, 3.0) as f32
        });
        let cd = Tensor4::from_fn(Shape4::new(1, 5, 4, 4), |_, _, _, _| {
            rng.uniform_range(-1.0, 1.0) as f32
        });
        let mut g: Graph<f32> = Graph::new();
        let mut ctx = PassCtx::new(&mut g, &mut store, false);
        let x = ctx.g.constant(xd.clone());
        let c = ctx.g.constant(cd);
        let ld0 = zero_logdet(ctx.g, 1);
        let (y, ld) = step.forward(&mut ctx, x, Some(c), ld0).unwrap();
        let (x2, ld2) = step.inverse(&mut ctx, y, Some(c), ld).unwrap();
        assert!(g.data(x2).max_abs_diff(&xd) < 1e-4);
        assert!(g.data(ld2).data()[0].abs() < 1e-3);
    }
}
