//! Built-in invariant suite.
//!
//! Each `check_*` function exercises one verifiable contract of the engine —
//! invertibility, Jacobian/gradient correctness against finite differences,
//! actnorm initialization, temperature behavior, checkpoint round trips —
//! and returns a one-line summary on success or a structured error naming
//! the first violation. The `selftest` CLI subcommand runs the whole suite;
//! the integration tests call the same functions individually so the CLI and
//! the test harness can never drift apart.

use std::cell::RefCell;

use crate::dataio::diversity;
use crate::error::{Error, Result};
use crate::flow::{zero_logdet, ActNorm, AffineCoupling, Inv1x1, SqueezeKind};
use crate::model::{
    randomize_for_test, ConditioningMode, HcFlow, HcFlowConfig,
};
use crate::numerics::{
    Graph, ParamStore, PassCtx, Shape4, SplitMix64, Tensor, Tensor4,
};
use crate::objective::{nll_graph, rescaling_loss, sample_latents, sr_loss, LossWeights};
use crate::oracle::{gradient_check, jacobian_logdet_check};
use crate::runner::{load_checkpoint, save_checkpoint, TrainConfig};

/// Round trips evaluated per configuration in [`check_invertibility`].
pub const ROUND_TRIPS_PER_CONFIG: usize = 50;
/// max|inverse(forward(x)) − x| bound for every round trip.
pub const ROUND_TRIP_TOL: f64 = 1e-4;
/// |analytic logdet − FD logdet| / dims bound for every Jacobian check.
pub const JACOBIAN_TOL: f64 = 1e-3;
/// Relative-error bound for every gradient coordinate.
pub const GRAD_TOL: f64 = 1e-3;
/// Minimum parameter coordinates probed across the three loss gradchecks.
pub const GRAD_COORDS: usize = 200;
/// Post-init per-channel |mean| bound.
pub const ACTNORM_MEAN_TOL: f64 = 1e-5;
/// Post-init per-channel |std − 1| bound.
pub const ACTNORM_STD_TOL: f64 = 1e-4;

fn rand_image(shape: Shape4, rng: &mut SplitMix64) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.uniform() as f32)
}

fn fail(check: &'static str, detail: String) -> Error {
    Error::SelfTest {
        check,
        detail,
    }
}

/// Invertibility: for {L=1, L=2} × {plain squeeze, Haar} × {hierarchical,
/// same-level, unconditional}, runs [`ROUND_TRIPS_PER_CONFIG`] randomized
/// round trips each and requires max|inverse(forward(x)) − x| <
/// [`ROUND_TRIP_TOL`].
pub fn check_invertibility() -> Result<String> {
    let mut seed = 0x1000u64;
    let mut worst = 0.0f64;
    let mut configs = 0usize;
    for levels in [1usize, 2] {
        for squeeze in [SqueezeKind::Space, SqueezeKind::Haar] {
            for conditioning in [
                ConditioningMode::Hierarchical,
                ConditioningMode::SameLevel,
                ConditioningMode::None,
            ] {
                seed += 1;
                configs += 1;
                let cfg = HcFlowConfig {
                    levels,
                    flow_steps: 2,
                    cond_flow_steps: 2,
                    conditioning,
                    squeeze,
                    use_1x1: squeeze == SqueezeKind::Space,
                    cond_widths: vec![8; levels],
                    cond_blocks: vec![1; levels],
                    head_width: 8,
                    lr_sigma: 0.02,
                };
                let mut store = ParamStore::new();
                let mut rng = SplitMix64::new(seed);
                let model = HcFlow::new(cfg, &mut store, &mut rng)?;
                randomize_for_test(&mut store, &mut rng);
                for trip in 0..ROUND_TRIPS_PER_CONFIG {
                    let xd = rand_image(Shape4::new(1, 3, 8, 8), &mut rng);
                    let mut g: Graph<f32> = Graph::new();
                    let mut ctx = PassCtx::new(&mut g, &mut store, false);
                    let x = ctx.g.constant(xd.clone());
                    let d = model.forward_decompose(&mut ctx, x)?;
                    let x2 = model.inverse_generate(&mut ctx, d.y, &d.z)?;
                    let err = g.data(x2).max_abs_diff(&xd);
                    if err >= ROUND_TRIP_TOL {
                        return Err(fail(
                            "invertibility",
                            format!(
                                "round trip {trip} error {err:.3e} ≥ {ROUND_TRIP_TOL:.0e} \
                                 (levels={levels}, squeeze={}, conditioning={})",
                                squeeze.as_str(),
                                conditioning.as_str()
                            ),
                        ));
                    }
                    worst = worst.max(err);
                }
            }
        }
    }
    Ok(format!(
        "{configs} configs x {ROUND_TRIPS_PER_CONFIG} round trips, max error {worst:.2e}"
    ))
}

/// One named Jacobian probe: builds the flattened map + analytic logdet.
fn layer_jacobian<F>(name: &'static str, shape: Shape4, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(Vec<f64>, f64)>,
{
    let mut rng = SplitMix64::new(seed);
    let x0: Vec<f64> = (0..shape.numel()).map(|_| rng.uniform()).collect();
    let r = jacobian_logdet_check(&x0, 1e-5, f)?;
    if r.err_per_dim >= JACOBIAN_TOL {
        return Err(fail(
            "jacobian",
            format!(
                "{name}: |analytic − FD|/dims = {:.3e} ≥ {JACOBIAN_TOL:.0e} \
                 (analytic {:.6}, FD {:.6}, dims {})",
                r.err_per_dim, r.logdet_analytic, r.logdet_fd, r.dims
            ),
        ));
    }
    Ok(r.err_per_dim)
}

/// Jacobian oracle: every individual layer on ≤48-element inputs, plus the
/// full single-level model on a (1,3,4,4) input. The analytic log-det must
/// match the log-det of the finite-difference Jacobian to [`JACOBIAN_TOL`]
/// per dimension.
pub fn check_jacobians() -> Result<String> {
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    let mut track = |e: f64| {
        probes += 1;
        if e > worst {
            worst = e;
        }
    };

    // squeeze and Haar: volume-preserving permutation / orthonormal wavelet
    for (name, kind) in [
        ("squeeze(space)", SqueezeKind::Space),
        ("squeeze(haar)", SqueezeKind::Haar),
    ] {
        let shape = Shape4::new(1, 1, 4, 4);
        track(layer_jacobian(name, shape, 0x2001, |x| {
            let mut g: Graph<f64> = Graph::new();
            let t = Tensor::from_vec(shape, x.to_vec())?;
            let xv = g.constant(t);
            let y = kind.forward(&mut g, xv)?;
            Ok((g.data(y).data().to_vec(), 0.0))
        })?);
    }

    // actnorm with randomized scale/bias
    {
        let shape = Shape4::new(1, 3, 2, 2);
        let mut store = ParamStore::new();
        let an = ActNorm::new(&mut store, "an", 3)?;
        let mut rng = SplitMix64::new(0x2002);
        let sid = store.id_of("an/scale").expect("registered above");
        let bid = store.id_of("an/bias").expect("registered above");
        store.set(sid, Tensor4::from_fn(Shape4::new(1, 3, 1, 1), |_, _, _, _| {
            0.5 + rng.uniform() as f32
        }))?;
        store.set(bid, Tensor4::from_fn(Shape4::new(1, 3, 1, 1), |_, _, _, _| {
            0.3 * rng.normal() as f32
        }))?;
        let cell = RefCell::new(store);
        track(layer_jacobian("actnorm", shape, 0x2002, |x| {
            let mut st = cell.borrow_mut();
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut st, false);
            let t = Tensor::from_vec(shape, x.to_vec())?;
            let xv = ctx.g.constant(t);
            let ld = zero_logdet(ctx.g, 1);
            let (y, ld) = an.forward(&mut ctx, xv, ld)?;
            Ok((g.data(y).data().to_vec(), g.data(ld).data()[0]))
        })?);
    }

    // invertible 1x1 with a randomized near-identity mixing matrix
    {
        let shape = Shape4::new(1, 4, 2, 2);
        let mut store = ParamStore::new();
        let mix = Inv1x1::new(&mut store, "mix", 4)?;
        let mut rng = SplitMix64::new(0x2003);
        let wid = store.id_of("mix/w").expect("registered above");
        store.set(wid, Tensor4::from_fn(Shape4::new(4, 4, 1, 1), |o, c, _, _| {
            let eye = if o == c { 1.0 } else { 0.0 };
            eye + 0.15 * rng.normal() as f32
        }))?;
        let cell = RefCell::new(store);
        track(layer_jacobian("inv1x1", shape, 0x2003, |x| {
            let mut st = cell.borrow_mut();
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut st, false);
            let t = Tensor::from_vec(shape, x.to_vec())?;
            let xv = ctx.g.constant(t);
            let ld = zero_logdet(ctx.g, 1);
            let (y, ld) = mix.forward(&mut ctx, xv, ld)?;
            Ok((g.data(y).data().to_vec(), g.data(ld).data()[0]))
        })?);
    }

    // affine coupling, unconditional and conditional (features held fixed)
    for (name, cond_ch) in [("coupling", None), ("coupling(cond)", Some(2usize))] {
        let shape = Shape4::new(1, 4, 2, 2);
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0x2004);
        let cp = AffineCoupling::new(&mut store, "cp", 4, cond_ch, 8, &mut rng)?;
        // the final head layer is zero-initialized (identity coupling);
        // randomize it so the probe sees a non-trivial Jacobian
        for (suffix, scale) in [("cp/head/c3/w", 0.3f64), ("cp/head/c3/b", 0.1f64)] {
            let id = store.id_of(suffix).expect("registered above");
            let cur = store.value(id).shape();
            let t = Tensor4::from_fn(cur, |_, _, _, _| (scale * rng.normal()) as f32);
            store.set(id, t)?;
        }
        let cond_data = cond_ch.map(|c| {
            Tensor4::from_fn(Shape4::new(1, c, 2, 2), |_, _, _, _| rng.uniform() as f32)
        });
        let cell = RefCell::new(store);
        track(layer_jacobian(name, shape, 0x2004, |x| {
            let mut st = cell.borrow_mut();
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut st, false);
            let t = Tensor::from_vec(shape, x.to_vec())?;
            let xv = ctx.g.constant(t);
            let cond = cond_data
                .as_ref()
                .map(|c| ctx.g.constant(c.cast()));
            let ld = zero_logdet(ctx.g, 1);
            let (y, ld) = cp.forward(&mut ctx, xv, cond, ld)?;
            Ok((g.data(y).data().to_vec(), g.data(ld).data()[0]))
        })?);
    }

    // full single-level model on a 48-dimensional input
    {
        let shape = Shape4::new(1, 3, 4, 4);
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0x2005);
        let model = HcFlow::new(HcFlowConfig::tiny(), &mut store, &mut rng)?;
        randomize_for_test(&mut store, &mut rng);
        let cell = RefCell::new(store);
        track(layer_jacobian("full model", shape, 0x2005, |x| {
            let mut st = cell.borrow_mut();
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut st, false);
            let t = Tensor::from_vec(shape, x.to_vec())?;
            let xv = ctx.g.constant(t);
            let d = model.forward_decompose(&mut ctx, xv)?;
            let mut flat = g.data(d.y).data().to_vec();
            flat.extend_from_slice(g.data(d.z[0]).data());
            Ok((flat, g.data(d.logdet).data()[0]))
        })?);
    }

    Ok(format!(
        "{probes} maps checked, worst |analytic − FD|/dims = {worst:.2e}"
    ))
}

/// Gradient oracle: analytic gradients of the NLL, the SR loss, and the
/// rescaling loss against central finite differences on the single-level
/// config, relative error < [`GRAD_TOL`] over ≥ [`GRAD_COORDS`] parameter
/// coordinates in total. Pixel losses use a smaller FD step (their L1 terms
/// have kinks where a wide secant disagrees with the correct subgradient).
pub fn check_gradients() -> Result<String> {
    let mut total = 0usize;
    let mut worst = 0.0f64;

    // NLL — smooth everywhere, h = 1e-3
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0x3001);
        let model = HcFlow::new(HcFlowConfig::tiny(), &mut store, &mut rng)?;
        randomize_for_test(&mut store, &mut rng);
        let x = rand_image(Shape4::new(1, 3, 4, 4), &mut rng);
        let y = rand_image(Shape4::new(1, 3, 2, 2), &mut rng);
        let analytic = {
            let mut g: Graph<f32> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut store, true);
            let xv = ctx.g.constant(x.cast());
            let yv = ctx.g.constant(y.cast());
            let parts = nll_graph(&model, &mut ctx, xv, yv)?;
            let grads = ctx.g.backward(parts.nll_mean)?;
            ctx.collect_grads(&grads)
        };
        let report = gradient_check(&mut store, &analytic, 80, 1e-3, GRAD_TOL, |store| {
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, store, false);
            let xv = ctx.g.constant(x.cast());
            let yv = ctx.g.constant(y.cast());
            let parts = nll_graph(&model, &mut ctx, xv, yv)?;
            Ok(ctx.g.value_f64(parts.nll_mean))
        })?;
        if report.max_rel_err >= GRAD_TOL {
            return Err(fail(
                "gradients",
                format!("nll: max rel err {:.3e}, worst {:?}", report.max_rel_err, report.worst),
            ));
        }
        total += report.checked;
        worst = worst.max(report.max_rel_err);
    }

    // SR loss — L1 pixel term, h = 1e-4, frozen dequantization noise
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0x3002);
        let model = HcFlow::new(HcFlowConfig::tiny(), &mut store, &mut rng)?;
        randomize_for_test(&mut store, &mut rng);
        let x = rand_image(Shape4::new(1, 3, 4, 4), &mut rng);
        let y = rand_image(Shape4::new(1, 3, 2, 2), &mut rng);
        let w = LossWeights::sr_default();
        let analytic = {
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut store, true);
            let mut r = SplitMix64::new(0x3102);
            let parts = sr_loss(&model, &mut ctx, &x, &y, &w, &mut r)?;
            let grads = ctx.g.backward(parts.loss)?;
            ctx.collect_grads(&grads)
        };
        let report = gradient_check(&mut store, &analytic, 60, 1e-4, GRAD_TOL, |store| {
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, store, false);
            let mut r = SplitMix64::new(0x3102);
            let parts = sr_loss(&model, &mut ctx, &x, &y, &w, &mut r)?;
            Ok(ctx.g.value_f64(parts.loss))
        })?;
        if report.max_rel_err >= GRAD_TOL {
            return Err(fail(
                "gradients",
                format!("sr_loss: max rel err {:.3e}, worst {:?}", report.max_rel_err, report.worst),
            ));
        }
        total += report.checked;
        worst = worst.max(report.max_rel_err);
    }

    // rescaling loss — Haar config, frozen latent draws, h = 1e-4
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0x3003);
        let mut cfg = HcFlowConfig::tiny();
        cfg.squeeze = SqueezeKind::Haar;
        cfg.use_1x1 = false;
        let model = HcFlow::new(cfg, &mut store, &mut rng)?;
        randomize_for_test(&mut store, &mut rng);
        let x = rand_image(Shape4::new(1, 3, 4, 4), &mut rng);
        let y = rand_image(Shape4::new(1, 3, 2, 2), &mut rng);
        let w = LossWeights::rescaling_default();
        let analytic = {
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, &mut store, true);
            let mut r = SplitMix64::new(0x3103);
            let parts = rescaling_loss(&model, &mut ctx, &x, &y, &w, &mut r)?;
            let grads = ctx.g.backward(parts.loss)?;
            ctx.collect_grads(&grads)
        };
        let report = gradient_check(&mut store, &analytic, 60, 1e-4, GRAD_TOL, |store| {
            let mut g: Graph<f64> = Graph::new();
            let mut ctx = PassCtx::new(&mut g, store, false);
            let mut r = SplitMix64::new(0x3103);
            let parts = rescaling_loss(&model, &mut ctx, &x, &y, &w, &mut r)?;
            Ok(ctx.g.value_f64(parts.loss))
        })?;
        if report.max_rel_err >= GRAD_TOL {
            return Err(fail(
                "gradients",
                format!(
                    "rescaling_loss: max rel err {:.3e}, worst {:?}",
                    report.max_rel_err, report.worst
                ),
            ));
        }
        total += report.checked;
        worst = worst.max(report.max_rel_err);
    }

    if total < GRAD_COORDS {
        return Err(fail(
            "gradients",
            format!("only {total} coordinates probed, need ≥ {GRAD_COORDS}"),
        ));
    }
    Ok(format!(
        "{total} parameter coordinates across 3 losses, max rel err {worst:.2e}"
    ))
}

/// Actnorm init: after data-dependent initialization, replaying the init
/// batch must show per-channel |mean| < [`ACTNORM_MEAN_TOL`] and
/// |std − 1| < [`ACTNORM_STD_TOL`] at every actnorm output.
pub fn check_actnorm_init() -> Result<String> {
    let cfg = HcFlowConfig {
        flow_steps: 2,
        cond_flow_steps: 2,
        ..HcFlowConfig::sr_default()
    };
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(0x4001);
    let model = HcFlow::new(cfg, &mut store, &mut rng)?;
    let batch = rand_image(Shape4::new(4, 3, 16, 16), &mut rng);
    model.init_actnorms(&mut store, &batch)?;

    let mut g: Graph<f32> = Graph::new();
    let mut ctx = PassCtx::new(&mut g, &mut store, false);
    ctx.actnorm_trace = Some(Vec::new());
    let x = ctx.g.constant(batch);
    model.forward_decompose(&mut ctx, x)?;
    let trace = ctx.actnorm_trace.take().expect("trace was requested");
    if trace.is_empty() {
        return Err(fail("actnorm_init", "no actnorm outputs traced".into()));
    }
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    let mut channels = 0usize;
    for (name, var) in &trace {
        let t = g.data(*var);
        let s = t.shape();
        let plane = s.h * s.w;
        let n = (s.b * plane) as f64;
        for c in 0..s.c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for b in 0..s.b {
                let start = (b * s.c + c) * plane;
                for &v in &t.data()[start..start + plane] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / n;
            let std = (sq / n - mean * mean).max(0.0).sqrt();
            channels += 1;
            worst_mean = worst_mean.max(mean.abs());
            worst_std = worst_std.max((std - 1.0).abs());
            if mean.abs() >= ACTNORM_MEAN_TOL || (std - 1.0).abs() >= ACTNORM_STD_TOL {
                return Err(fail(
                    "actnorm_init",
                    format!("{name} channel {c}: mean {mean:.2e}, std {std:.6}"),
                ));
            }
        }
    }
    Ok(format!(
        "{} actnorms / {channels} channels, worst |mean| {worst_mean:.1e}, worst |std−1| {worst_std:.1e}",
        trace.len()
    ))
}

/// Temperature behavior: τ=0 generation is bit-identical across calls and
/// has zero sample diversity; τ=0.9 sampling has strictly positive diversity.
pub fn check_temperature() -> Result<String> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(0x5001);
    // Shallow two-step variant: randomized couplings compound multiplicatively
    // through the inverse, and at the default depth (4+4 steps) τ=0.9 latents
    // drawn far outside the identity-trained regime can overflow f32. Two
    // steps per level keeps amplification bounded (max |x| ≈ 10) while still
    // exercising every layer kind; trained models are exercised at full depth
    // by the training acceptance runs.
    let cfg = HcFlowConfig {
        flow_steps: 2,
        cond_flow_steps: 2,
        cond_widths: vec![8, 8],
        cond_blocks: vec![1, 1],
        head_width: 8,
        ..HcFlowConfig::sr_default()
    };
    let model = HcFlow::new(cfg, &mut store, &mut rng)?;
    randomize_for_test(&mut store, &mut rng);
    let hr = Shape4::new(1, 3, 16, 16);
    let y = rand_image(model.lr_shape(hr)?, &mut rng);

    let generate = |tau: f64, r: &mut SplitMix64, store: &mut ParamStore| -> Result<Tensor4> {
        let z = sample_latents(&model, hr, tau, r)?;
        let mut g: Graph<f32> = Graph::new();
        let mut ctx = PassCtx::new(&mut g, store, false);
        let yv = ctx.g.constant(y.clone());
        let zv: Vec<_> = z.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let x = model.inverse_generate(&mut ctx, yv, &zv)?;
        Ok(g.data(x).clone())
    };

    let mut r0a = SplitMix64::new(9);
    let mut r0b = SplitMix64::new(10); // different stream — τ=0 must not consume it
    let a = generate(0.0, &mut r0a, &mut store)?;
    let b = generate(0.0, &mut r0b, &mut store)?;
    if a.data() != b.data() {
        return Err(fail(
            "temperature",
            "τ=0 generations differ across calls".into(),
        ));
    }

    let zeros: Vec<Tensor4> = (0..5)
        .map(|i| generate(0.0, &mut SplitMix64::new(20 + i), &mut store))
        .collect::<Result<_>>()?;
    let div0 = diversity(&zeros)?;
    let mut rs = SplitMix64::new(30);
    let sampled: Vec<Tensor4> = (0..5)
        .map(|_| generate(0.9, &mut rs, &mut store))
        .collect::<Result<_>>()?;
    let div9 = diversity(&sampled)?;
    if div0 != 0.0 {
        return Err(fail(
            "temperature",
            format!("diversity at τ=0 is {div0:.3e}, want exactly 0"),
        ));
    }
    if !(div9 > div0) {
        return Err(fail(
            "temperature",
            format!("diversity at τ=0.9 is {div9:.3e}, not above the τ=0 value {div0:.3e}"),
        ));
    }
    Ok(format!(
        "τ=0 bit-identical with diversity 0, τ=0.9 diversity {div9:.3e}"
    ))
}

/// Checkpoint round trip: save → load reproduces every parameter bitwise;
/// loading into an incompatible config is rejected with a diagnostic naming
/// the offending parameter.
pub fn check_checkpoint() -> Result<String> {
    let dir = std::env::temp_dir().join(format!(
        "hcflow-selftest-{}-{:x}",
        std::process::id(),
        SplitMix64::new(0x6001).next_u64()
    ));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("temp dir {}: {e}", dir.display())))?;
    let result = checkpoint_round_trip(&dir);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn checkpoint_round_trip(dir: &std::path::Path) -> Result<String> {
    let mut cfg = TrainConfig::sr_default();
    cfg.model.levels = 1;
    cfg.model.cond_widths = vec![8];
    cfg.model.cond_blocks = vec![1];
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(0x6002);
    let _model = HcFlow::new(cfg.model.clone(), &mut store, &mut rng)?;
    randomize_for_test(&mut store, &mut rng);

    let path = dir.join("roundtrip.hcfl");
    save_checkpoint(&path, &cfg, 17, &store, None)?;
    let loaded = load_checkpoint(&path)?;
    let (_, mut store2) = loaded.build_model()?;
    loaded.install(&mut store2)?;
    let mut params = 0usize;
    for i in 0..store.len() {
        let id = store.id_at(i);
        let a = store.value(id).data();
        let b = store2.value(store2.id_of(store.name(id)).ok_or_else(|| {
            fail("checkpoint", format!("parameter '{}' missing after reload", store.name(id)))
        })?).data();
        if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(fail(
                "checkpoint",
                format!("parameter '{}' is not bitwise equal after reload", store.name(id)),
            ));
        }
        params += 1;
    }
    if loaded.step != 17 {
        return Err(fail(
            "checkpoint",
            format!("step 17 reloaded as {}", loaded.step),
        ));
    }

    // cross-config load must fail naming a parameter
    let mut other_cfg = cfg.clone();
    other_cfg.model.levels = 2;
    other_cfg.model.cond_widths = vec![8, 8];
    other_cfg.model.cond_blocks = vec![1, 1];
    let mut other_store = ParamStore::new();
    let mut rng2 = SplitMix64::new(0x6003);
    let _other = HcFlow::new(other_cfg.model.clone(), &mut other_store, &mut rng2)?;
    match loaded.install(&mut other_store) {
        Err(Error::ParamShapeConflict { name, .. }) => {
            if name.is_empty() {
                return Err(fail("checkpoint", "shape conflict lost the parameter name".into()));
            }
        }
        Err(Error::Checkpoint(msg)) => {
            if !msg.contains('/') {
                return Err(fail(
                    "checkpoint",
                    format!("cross-config rejection does not name a parameter: {msg}"),
                ));
            }
        }
        Err(other) => {
            return Err(fail(
                "checkpoint",
                format!("cross-config load failed without naming a parameter: {other}"),
            ));
        }
        Ok(()) => {
            return Err(fail(
                "checkpoint",
                "cross-config load was accepted; it must be rejected".into(),
            ));
        }
    }
    Ok(format!("{params} parameters bitwise-stable; cross-config load rejected by name"))
}

/// Runs the whole suite, printing one line per check through `out`.
/// Returns (passed, failed).
pub fn run_all(mut out: impl FnMut(&str)) -> (usize, usize) {
    let checks: [(&str, fn() -> Result<String>); 6] = [
        ("invertibility", check_invertibility),
        ("jacobian", check_jacobians),
        ("gradients", check_gradients),
        ("actnorm_init", check_actnorm_init),
        ("temperature", check_temperature),
        ("checkpoint", check_checkpoint),
    ];
    let mut passed = 0;
    let mut failed = 0;
    for (name, f) in checks {
        match f() {
            Ok(detail) => {
                passed += 1;
                out(&format!("[selftest] {name}: ok — {detail}"));
            }
            Err(e) => {
                failed += 1;
                out(&format!("[selftest] {name}: FAILED — {e}"));
            }
        }
    }
    out(&format!(
        "[selftest] {passed} passed, {failed} failed ({} checks)",
        passed + failed
    ));
    (passed, failed)
}

#[cfg(test)]
mod tests {
    // The acceptance suite exercises every check in this module end to end;
    // here we only pin the aggregate runner's counting contract.
    use super::*;

    #[test]
    fn run_all_reports_every_check() {
        let mut lines = Vec::new();
        let (passed, failed) = run_all(|s| lines.push(s.to_string()));
        assert_eq!(passed + failed, 6);
        assert_eq!(lines.len(), 7, "6 check lines + 1 summary");
        assert!(lines[6].contains(&format!("{passed} passed")));
    }
}
