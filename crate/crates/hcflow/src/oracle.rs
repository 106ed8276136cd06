//! Finite-difference oracles.
//!
//! These validate the two exactness claims the engine rests on: analytic
//! log-determinants match the determinant of a numerically assembled Jacobian,
//! and analytic parameter gradients match central finite differences. The
//! reference evaluations run in `f64` graphs — the production `f32` path and
//! the reference share the same generic code, so the comparison checks the
//! math, not two independent implementations of it.

use crate::error::{Error, Result};
use crate::numerics::linalg;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor4;

/// Outcome of one Jacobian/log-det comparison.
#[derive(Debug, Clone)]
pub struct JacobianCheck {
    pub dims: usize,
    pub logdet_analytic: f64,
    pub logdet_fd: f64,
    /// |analytic − finite-difference| / dims.
    pub err_per_dim: f64,
}

/// Assembles the full Jacobian of a dimension-preserving map by central
/// differences and compares `log|det J|` against the analytic log-det the map
/// reports. `f` must be deterministic; it is called `2·dims + 1` times.
pub fn jacobian_logdet_check<F>(x0: &[f64], h: f64, f: F) -> Result<JacobianCheck>
where
    F: Fn(&[f64]) -> Result<(Vec<f64>, f64)>,
{
    let d = x0.len();
    let (y0, logdet_analytic) = f(x0)?;
    if y0.len() != d {
        return Err(Error::invalid(
            "jacobian_check",
            format!("map is not dimension preserving: {d} → {}", y0.len()),
        ));
    }
    let mut jac = vec![0.0f64; d * d];
    let mut xp = x0.to_vec();
    let mut xm = x0.to_vec();
    for j in 0..d {
        xp[j] = x0[j] + h;
        xm[j] = x0[j] - h;
        let (yp, _) = f(&xp)?;
        let (ym, _) = f(&xm)?;
        let denom = xp[j] - xm[j];
        for i in 0..d {
            jac[i * d + j] = (yp[i] - ym[i]) / denom;
        }
        xp[j] = x0[j];
        xm[j] = x0[j];
    }
    let (logdet_fd, _) = linalg::logabsdet(&jac, d).ok_or(Error::SingularMatrix { det_abs: 0.0 })?;
    Ok(JacobianCheck {
        dims: d,
        logdet_analytic,
        logdet_fd,
        err_per_dim: (logdet_analytic - logdet_fd).abs() / d as f64,
    })
}

/// One compared parameter coordinate.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// Outcome of a parameter-space gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradProbe>,
}

/// Absolute floor under which FD truncation noise dominates and a coordinate
/// comparison carries no signal.
const GRAD_ATOL: f64 = 1e-5;

/// Compares analytic parameter gradients against central finite differences.
///
/// `analytic` is indexed like the store (a `None` entry is treated as zero —
/// if the parameter actually moves the loss, the FD probe exposes the missing
/// gradient). `loss_ref` re-evaluates the loss for perturbed parameters and
/// must be deterministic: any sampling inside must be re-derived from a fixed
/// seed so both FD evaluations see identical noise. At least `min_coords`
/// coordinates are probed, spread over every parameter tensor.
///
/// A coordinate passes when |a − fd| ≤ tol·max(|a|,|fd|) + atol; the reported
/// `rel_err` is |a − fd| / max(|a|, |fd|, atol/tol) so the pass condition is
/// `max_rel_err ≤ tol`.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    analytic: &[Option<Tensor4>],
    min_coords: usize,
    h: f32,
    tol: f64,
    mut loss_ref: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if analytic.len() != store.len() {
        return Err(Error::invalid(
            "gradient_check",
            format!(
                "analytic gradient list has {} entries for {} parameters",
                analytic.len(),
                store.len()
            ),
        ));
    }
    let total = store.total_elements();
    let stride = (total / min_coords.max(1)).max(1);
    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst: Option<GradProbe> = None;
    for pi in 0..store.len() {
        let id = store.id_at(pi);
        let n = store.value(id).numel();
        let mut k = pi % stride.min(n);
        while k < n {
            let orig = store.value(id).data()[k];
            let vp = orig + h;
            let vm = orig - h;
            store.value_mut(id).data_mut()[k] = vp;
            let lp = loss_ref(store)?;
            store.value_mut(id).data_mut()[k] = vm;
            let lm = loss_ref(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let fd = (lp - lm) / ((vp - vm) as f64);
            let a = analytic[pi]
                .as_ref()
                .map(|t| t.data()[k] as f64)
                .unwrap_or(0.0);
            let rel_err = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_ATOL / tol);
            if rel_err > max_rel_err {
                max_rel_err = rel_err;
                worst = Some(GradProbe {
                    param: store.name(id).to_string(),
                    coord: k,
                    analytic: a,
                    fd,
                    rel_err,
                });
            }
            checked += 1;
            k += stride;
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{zero_logdet, ActNorm, AffineCoupling, Inv1x1, SqueezeKind};
    use crate::numerics::graph::Graph;
    use crate::numerics::params::PassCtx;
    use crate::numerics::rng::SplitMix64;
    use crate::numerics::tensor::Shape4;

    /// Evaluates one flow layer in an f64 graph: flat input → (flat output,
    /// analytic per-item logdet).
    fn eval_layer<F>(shape: Shape4, store: &mut ParamStore, x: &[f64], apply: F) -> (Vec<f64>, f64)
    where
        F: Fn(&mut PassCtx<f64>, crate::numerics::graph::Var, crate::numerics::graph::Var) -> (
            crate::numerics::graph::Var,
            crate::numerics::graph::Var,
        ),
    {
        let mut g: Graph<f64> = Graph::new();
        let mut ctx = PassCtx::new(&mut g, store, false);
        let t = crate::numerics::tensor::Tensor::from_vec(shape, x.to_vec()).unwrap();
        let xv = ctx.g.constant(t);
        let ld0 = zero_logdet(ctx.g, 1);
        let (y, ld) = apply(&mut ctx, xv, ld0);
        (g.data(y).data().to_vec(), g.data(ld).data()[0])
    }

    fn rand_flat(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_range(-1.5, 1.5)).collect()
    }

    #[test]
    fn jacobian_check_rejects_dimension_change() {
        let bad = |x: &[f64]| Ok((x[..2].to_vec(), 0.0));
        assert!(jacobian_logdet_check(&[1.0, 2.0, 3.0], 1e-4, bad).is_err());
    }

    #[test]
    fn jacobian_check_exact_on_linear_map() {
        // y = diag(2,3)·x → logdet = ln 6
        let f = |x: &[f64]| Ok((vec![2.0 * x[0], 3.0 * x[1]], (6.0f64).ln()));
        let r = jacobian_logdet_check(&[0.4, -0.7], 1e-4, f).unwrap();
        assert!(r.err_per_dim < 1e-10, "err {}", r.err_per_dim);
    }

    #[test]
    fn actnorm_jacobian_matches_analytic_logdet() {
        let mut store = ParamStore::new();
        let an = ActNorm::new(&mut store, "an", 3).unwrap();
        let sid = store.id_of("an/scale").unwrap();
        let bid = store.id_of("an/bias").unwrap();
        store
            .set(sid, Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![1.3, 0.6, 2.1]).unwrap())
            .unwrap();
        store
            .set(bid, Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![0.2, -0.4, 0.9]).unwrap())
            .unwrap();
        let shape = Shape4::new(1, 3, 4, 4); // 48 elements
        let mut rng = SplitMix64::new(31);
        let x0 = rand_flat(shape.numel(), &mut rng);
        let store_cell = std::cell::RefCell::new(store);
        let r = jacobian_logdet_check(&x0, 1e-4, |x| {
            let mut st = store_cell.borrow_mut();
            Ok(eval_layer(shape, &mut st, x, |ctx, xv, ld| {
                an.forward(ctx, xv, ld).unwrap()
            }))
        })
        .unwrap();
        assert!(r.err_per_dim < 1e-3, "err/dim {}", r.err_per_dim);
    }

    #[test]
    fn inv1x1_jacobian_matches_analytic_logdet() {
        let mut store = ParamStore::new();
        let mix = Inv1x1::new(&mut store, "mix", 4).unwrap();
        let mut rng = SplitMix64::new(32);
        let wid = store.id_of("mix/w").unwrap();
        let w = Tensor4::from_fn(Shape4::new(4, 4, 1, 1), |o, i, _, _| {
            let eye = if o == i { 1.0 } else { 0.0 };
            eye + 0.25 * rng.normal() as f32
        });
        store.set(wid, w).unwrap();
        let shape = Shape4::new(1, 4, 3, 3); // 36 elements
        let x0 = rand_flat(shape.numel(), &mut rng);
        let store_cell = std::cell::RefCell::new(store);
        let r = jacobian_logdet_check(&x0, 1e-4, |x| {
            let mut st = store_cell.borrow_mut();
            Ok(eval_layer(shape, &mut st, x, |ctx, xv, ld| {
                mix.forward(ctx, xv, ld).unwrap()
            }))
        })
        .unwrap();
        assert!(r.err_per_dim < 1e-3, "err/dim {}", r.err_per_dim);
    }

    #[test]
    fn coupling_jacobian_matches_analytic_logdet() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(33);
        let cp = AffineCoupling::new(&mut store, "cp", 4, None, 6, &mut rng).unwrap();
        let cid = store.id_of("cp/head/c3/w").unwrap();
        let shape3 = store.value(cid).shape();
        let w = Tensor4::from_fn(shape3, |_, _, _, _| 0.2 * rng.normal() as f32);
        store.set(cid, w).unwrap();
        let shape = Shape4::new(1, 4, 3, 3);
        let x0 = rand_flat(shape.numel(), &mut rng);
        let store_cell = std::cell::RefCell::new(store);
        let r = jacobian_logdet_check(&x0, 1e-4, |x| {
            let mut st = store_cell.borrow_mut();
            Ok(eval_layer(shape, &mut st, x, |ctx, xv, ld| {
                cp.forward(ctx, xv, None, ld).unwrap()
            }))
        })
        .unwrap();
        assert!(
            r.logdet_analytic.abs() > 1e-3,
            "coupling should be non-trivial"
        );
        assert!(r.err_per_dim < 1e-3, "err/dim {}", r.err_per_dim);
    }

    #[test]
    fn squeeze_and_haar_jacobians_are_volume_preserving() {
        let shape = Shape4::new(1, 3, 4, 4);
        let mut rng = SplitMix64::new(34);
        let x0 = rand_flat(shape.numel(), &mut rng);
        for kind in [SqueezeKind::Space, SqueezeKind::Haar] {
            let r = jacobian_logdet_check(&x0, 1e-4, |x| {
                let mut g: Graph<f64> = Graph::new();
                let t = crate::numerics::tensor::Tensor::from_vec(shape, x.to_vec()).unwrap();
                let xv = g.constant(t);
                let y = kind.forward(&mut g, xv)?;
                Ok((g.data(y).data().to_vec(), 0.0))
            })
            .unwrap();
            assert!(
                r.err_per_dim < 1e-6,
                "{kind:?}: FD logdet {} should be 0",
                r.logdet_fd
            );
        }
    }

    #[test]
    fn gradient_check_catches_a_wrong_gradient() {
        // loss = Σ w² → dl/dw = 2w; corrupt one analytic entry and expect a flag.
        let mut store = ParamStore::new();
        let id = store
            .register(
                "w",
                Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.5, -0.3, 0.8, 0.1]).unwrap(),
            )
            .unwrap();
        let loss = |store: &mut ParamStore| -> Result<f64> {
            Ok(store.value(store.id_of("w").unwrap())
                .data()
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum())
        };
        let good: Vec<Option<Tensor4>> = vec![Some(Tensor4::from_vec(
            Shape4::new(1, 1, 2, 2),
            vec![1.0, -0.6, 1.6, 0.2],
        )
        .unwrap())];
        let r = gradient_check(&mut store, &good, 4, 1e-4, 1e-3, loss).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_err < 1e-3, "max rel {}", r.max_rel_err);

        let bad: Vec<Option<Tensor4>> = vec![Some(Tensor4::from_vec(
            Shape4::new(1, 1, 2, 2),
            vec![1.0, -0.6, 2.6, 0.2],
        )
        .unwrap())];
        let r = gradient_check(&mut store, &bad, 4, 1e-4, 1e-3, loss).unwrap();
        assert!(r.max_rel_err > 0.1);
        assert_eq!(r.worst.unwrap().coord, 2);
        let _ = id;
    }

    #[test]
    fn gradient_check_flags_missing_gradient() {
        // analytic None but the loss moves with the parameter → rel err ≈ 1
        let mut store = ParamStore::new();
        store
            .register("w", Tensor4::full(Shape4::new(1, 1, 1, 1), 0.7))
            .unwrap();
        let loss = |store: &mut ParamStore| -> Result<f64> {
            Ok(store.value(store.id_of("w").unwrap()).data()[0] as f64 * 3.0)
        };
        let r = gradient_check(&mut store, &[None], 1, 1e-4, 1e-3, loss).unwrap();
        assert!(r.max_rel_err > 0.9, "missing gradient must be flagged");
    }
}
