//! The full hierarchical conditional flow: an exact bijection between an HR
//! image x and the pair (LR image y, latents z_1..z_L).
//!
//! Each level squeezes (space-to-channel or Haar), runs K unconditional flow
//! steps, and splits into a low-frequency part y_l (carried to the next
//! level) and a high-frequency part a_l. After the deepest level produces
//! y = y_L, conditional features c_l are derived from the y_l hierarchy and
//! each a_l is transformed by P conditional flow steps into z_l, deepest
//! level first. The inverse retraces everything exactly, reconstructing the
//! per-level features from y alone as it goes.

use crate::conditioner::ResidualConditioner;
use crate::error::{Error, Result};
use crate::flow::{split_channels, zero_logdet, FlowStep, SqueezeKind};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamStore, PassCtx};
use crate::numerics::real::Real;
use crate::numerics::rng::SplitMix64;
use crate::numerics::tensor::{Shape4, Tensor4};

/// What the conditional flows see of the LR hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Level l is conditioned on features of all coarser levels and y_l.
    Hierarchical,
    /// Level l is conditioned on features of y_l only.
    SameLevel,
    /// Conditional flows degrade to unconditional couplings.
    None,
}

impl ConditioningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Hierarchical => "hierarchical",
            ConditioningMode::SameLevel => "same_level",
            ConditioningMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(ConditioningMode::Hierarchical),
            "same_level" => Ok(ConditioningMode::SameLevel),
            "none" => Ok(ConditioningMode::None),
            other => Err(Error::Config(format!(
                "unknown conditioning mode '{other}' (expected hierarchical, same_level, or none)"
            ))),
        }
    }
}

impl SqueezeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SqueezeKind::Space => "plain",
            SqueezeKind::Haar => "haar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SqueezeKind::Space),
            "haar" => Ok(SqueezeKind::Haar),
            other => Err(Error::Config(format!(
                "unknown squeeze kind '{other}' (expected plain or haar)"
            ))),
        }
    }
}

/// Architecture hyperparameters. The scale factor is always 2^levels.
#[derive(Debug, Clone, PartialEq)]
pub struct HcFlowConfig {
    pub levels: usize,
    /// K: unconditional flow steps per level.
    pub flow_steps: usize,
    /// P: conditional flow steps per level.
    pub cond_flow_steps: usize,
    pub conditioning: ConditioningMode,
    pub squeeze: SqueezeKind,
    pub use_1x1: bool,
    /// Conditioner feature width per level.
    pub cond_widths: Vec<usize>,
    /// Residual blocks per level's conditioner.
    pub cond_blocks: Vec<usize>,
    /// Hidden width of every coupling head.
    pub head_width: usize,
    /// Standard deviation of the Dirac-approximation fit of the generated LR
    /// image to the ground-truth LR image (pixel units in [0,1]).
    pub lr_sigma: f64,
}

impl HcFlowConfig {
    /// Desk-scale super-resolution default: plain squeeze with 1×1 mixing.
    pub fn sr_default() -> Self {
        HcFlowConfig {
            levels: 2,
            flow_steps: 4,
            cond_flow_steps: 4,
            conditioning: ConditioningMode::Hierarchical,
            squeeze: SqueezeKind::Space,
            use_1x1: true,
            cond_widths: vec![16, 16],
            cond_blocks: vec![2, 2],
            head_width: 16,
            lr_sigma: 0.02,
        }
    }

    /// Desk-scale rescaling default: Haar squeeze, no 1×1 mixing.
    pub fn rescaling_default() -> Self {
        HcFlowConfig {
            squeeze: SqueezeKind::Haar,
            use_1x1: false,
            ..HcFlowConfig::sr_default()
        }
    }

    /// Smallest legal model; used by oracles and fast self-tests.
    pub fn tiny() -> Self {
        HcFlowConfig {
            levels: 1,
            flow_steps: 1,
            cond_flow_steps: 1,
            conditioning: ConditioningMode::Hierarchical,
            squeeze: SqueezeKind::Space,
            use_1x1: true,
            cond_widths: vec![8],
            cond_blocks: vec![1],
            head_width: 8,
            lr_sigma: 0.02,
        }
    }

    pub fn scale_factor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be ≥ 1".into()));
        }
        if self.levels > 6 {
            return Err(Error::Config(format!(
                "levels = {} gives scale factor {}; more than 6 levels is unsupported",
                self.levels,
                1usize << self.levels
            )));
        }
        if self.flow_steps == 0 {
            return Err(Error::Config("flow_steps must be ≥ 1".into()));
        }
        if self.cond_flow_steps == 0 {
            return Err(Error::Config("cond_flow_steps must be ≥ 1".into()));
        }
        if self.head_width == 0 {
            return Err(Error::Config("head_width must be ≥ 1".into()));
        }
        if !(self.lr_sigma > 0.0) {
            return Err(Error::Config(format!(
                "lr_sigma must be > 0, got {}",
                self.lr_sigma
            )));
        }
        for (name, list) in [("cond_widths", &self.cond_widths), ("cond_blocks", &self.cond_blocks)]
        {
            if list.len() != self.levels {
                return Err(Error::Config(format!(
                    "{name} must list one entry per level ({} expected, {} given)",
                    self.levels,
                    list.len()
                )));
            }
        }
        if self.cond_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("cond_widths entries must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Serializes to `key=value` lines (the checkpoint's embedded form).
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "levels={}\nflow_steps={}\ncond_flow_steps={}\nconditioning={}\nsqueeze={}\nuse_1x1={}\ncond_widths={}\ncond_blocks={}\nhead_width={}\nlr_sigma={}\n",
            self.levels,
            self.flow_steps,
            self.cond_flow_steps,
            self.conditioning.as_str(),
            self.squeeze.as_str(),
            self.use_1x1,
            list(&self.cond_widths),
            list(&self.cond_blocks),
            self.head_width,
            self.lr_sigma,
        )
    }

    /// Applies `key=value` lines over this config. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            self.apply_field(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn count(key: &str, value: &str) -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key} expects a non-negative integer, got '{value}'")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{key} expects true or false, got '{value}'"
                ))),
            }
        }
        fn counts(key: &str, value: &str) -> Result<Vec<usize>> {
            value.split(',').map(|p| count(key, p.trim())).collect()
        }
        match key {
            "levels" => self.levels = count(key, value)?,
            "flow_steps" => self.flow_steps = count(key, value)?,
            "cond_flow_steps" => self.cond_flow_steps = count(key, value)?,
            "conditioning" => self.conditioning = ConditioningMode::parse(value)?,
            "squeeze" => self.squeeze = SqueezeKind::parse(value)?,
            "use_1x1" => self.use_1x1 = flag(key, value)?,
            "cond_widths" => self.cond_widths = counts(key, value)?,
            "cond_blocks" => self.cond_blocks = counts(key, value)?,
            "head_width" => self.head_width = count(key, value)?,
            "lr_sigma" => {
                self.lr_sigma = value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("lr_sigma expects a number, got '{value}'")))?
            }
            other => return Err(Error::Config(format!("unknown model config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = HcFlowConfig::sr_default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Channel bookkeeping of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelDims {
    /// Channels entering the level (3 at level 1, previous keep after).
    pub in_ch: usize,
    /// Channels after the 2×2 squeeze: 4·in_ch.
    pub squeezed: usize,
    /// Channels kept as y_l: half, except the last level keeps exactly 3.
    pub keep: usize,
    /// Channels factored out as a_l.
    pub aux: usize,
}

/// Channel arithmetic for all levels: squeeze ×4, split half/half, last
/// level keeps exactly the 3 image channels.
pub fn level_dims(levels: usize) -> Vec<LevelDims> {
    let mut dims = Vec::with_capacity(levels);
    let mut c = 3usize;
    for l in 1..=levels {
        let squeezed = 4 * c;
        let keep = if l == levels { 3 } else { squeezed / 2 };
        dims.push(LevelDims {
            in_ch: c,
            squeezed,
            keep,
            aux: squeezed - keep,
        });
        c = keep;
    }
    dims
}

struct Level {
    dims: LevelDims,
    steps: Vec<FlowStep>,
    phi: Option<ResidualConditioner>,
    cond_steps: Vec<FlowStep>,
}

/// Result of a forward decomposition, as graph nodes.
pub struct Decomposition {
    /// Generated LR image y = y_L (3 channels).
    pub y: Var,
    /// Latents z_1..z_L (index 0 is level 1).
    pub z: Vec<Var>,
    /// Per-batch-item log-determinant of the whole map, shape (B,1,1,1).
    pub logdet: Var,
}

pub struct HcFlow {
    pub config: HcFlowConfig,
    levels: Vec<Level>,
}

impl HcFlow {
    /// Builds the model, registering every parameter in a fixed traversal
    /// order (levels outer, flow steps then conditioner then conditional
    /// steps inner).
    pub fn new(
        config: HcFlowConfig,
        store: &mut ParamStore,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        let dims = level_dims(config.levels);
        let nlev = config.levels;
        let mut levels = Vec::with_capacity(nlev);
        for (li, &d) in dims.iter().enumerate() {
            let l = li + 1;
            let mut steps = Vec::with_capacity(config.flow_steps);
            for k in 0..config.flow_steps {
                steps.push(FlowStep::new(
                    store,
                    &format!("level{l}/step{k}"),
                    d.squeezed,
                    None,
                    config.use_1x1,
                    config.head_width,
                    rng,
                )?);
            }
            let phi = match config.conditioning {
                ConditioningMode::None => None,
                ConditioningMode::SameLevel => Some(ResidualConditioner::new(
                    store,
                    &format!("level{l}/phi"),
                    d.keep,
                    config.cond_widths[li],
                    config.cond_blocks[li],
                    rng,
                )?),
                ConditioningMode::Hierarchical => {
                    let deeper: usize = config.cond_widths[li + 1..].iter().sum();
                    Some(ResidualConditioner::new(
                        store,
                        &format!("level{l}/phi"),
                        d.keep + deeper,
                        config.cond_widths[li],
                        config.cond_blocks[li],
                        rng,
                    )?)
                }
            };
            let cond_ch = match config.conditioning {
                ConditioningMode::None => None,
                _ => Some(config.cond_widths[li]),
            };
            let mut cond_steps = Vec::with_capacity(config.cond_flow_steps);
            for p in 0..config.cond_flow_steps {
                cond_steps.push(FlowStep::new(
                    store,
                    &format!("level{l}/cstep{p}"),
                    d.aux,
                    cond_ch,
                    config.use_1x1,
                    config.head_width,
                    rng,
                )?);
            }
            levels.push(Level {
                dims: d,
                steps,
                phi,
                cond_steps,
            });
        }
        Ok(HcFlow { config, levels })
    }

    pub fn dims(&self) -> Vec<LevelDims> {
        self.levels.iter().map(|l| l.dims).collect()
    }

    fn check_hr_shape(&self, s: Shape4) -> Result<()> {
        if s.c != 3 {
            return Err(Error::shape(
                "forward_decompose",
                format!("HR input must have 3 channels, got {}", s.c),
            ));
        }
        let sf = self.config.scale_factor();
        if s.h % sf != 0 || s.w % sf != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape(
                "forward_decompose",
                format!("spatial size {}x{} is not divisible by the scale factor {sf}", s.h, s.w),
            ));
        }
        Ok(())
    }

    /// Shape of the generated LR image for a given HR shape.
    pub fn lr_shape(&self, hr: Shape4) -> Result<Shape4> {
        self.check_hr_shape(hr)?;
        let sf = self.config.scale_factor();
        Ok(Shape4::new(hr.b, 3, hr.h / sf, hr.w / sf))
    }

    /// Shapes of z_1..z_L for a given HR shape.
    pub fn latent_shapes(&self, hr: Shape4) -> Result<Vec<Shape4>> {
        self.check_hr_shape(hr)?;
        Ok(self
            .levels
            .iter()
            .enumerate()
            .map(|(li, lev)| {
                Shape4::new(hr.b, lev.dims.aux, hr.h >> (li + 1), hr.w >> (li + 1))
            })
            .collect())
    }

    /// Conditional features c_l for one level from its y_l and the already
    /// computed features of all deeper levels (Eq. 5 ordering: deepest
    /// feature first, each upsampled ×2 per level gap, then y_l).
    fn feature_for_level<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        li: usize,
        y_l: Var,
        feats: &[Option<Var>],
    ) -> Result<Option<Var>> {
        let level = &self.levels[li];
        let phi = match self.config.conditioning {
            ConditioningMode::None => return Ok(None),
            _ => level.phi.as_ref().expect("conditioning on ⇒ φ exists"),
        };
        let input = match self.config.conditioning {
            ConditioningMode::SameLevel => y_l,
            ConditioningMode::Hierarchical => {
                let nlev = self.levels.len();
                let mut parts = Vec::with_capacity(nlev - li);
                for mi in (li + 1..nlev).rev() {
                    let mut f = feats[mi].expect("deeper features are computed first");
                    for _ in 0..(mi - li) {
                        f = ctx.g.upsample2(f);
                    }
                    parts.push(f);
                }
                parts.push(y_l);
                if parts.len() == 1 {
                    parts[0]
                } else {
                    ctx.g.concat_channels(&parts)?
                }
            }
            ConditioningMode::None => unreachable!(),
        };
        Ok(Some(phi.apply(ctx, input)?))
    }

    /// Features c_1..c_L from the per-level LR hierarchy (deepest computed
    /// first). `ys[li]` is y_{li+1}; all `None` in unconditional mode.
    pub fn conditional_features<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        ys: &[Var],
    ) -> Result<Vec<Option<Var>>> {
        if ys.len() != self.levels.len() {
            return Err(Error::invalid(
                "conditional_features",
                format!("expected {} level outputs, got {}", self.levels.len(), ys.len()),
            ));
        }
        let mut feats: Vec<Option<Var>> = vec![None; self.levels.len()];
        for li in (0..self.levels.len()).rev() {
            feats[li] = self.feature_for_level(ctx, li, ys[li], &feats)?;
        }
        Ok(feats)
    }

    /// x → (y, z_1..z_L) with the accumulated per-item log-determinant.
    pub fn forward_decompose<R: Real>(&self, ctx: &mut PassCtx<R>, x: Var) -> Result<Decomposition> {
        let s = ctx.g.shape(x);
        self.check_hr_shape(s)?;
        let mut ld = zero_logdet(ctx.g, s.b);
        let mut h = x;
        let mut ys = Vec::with_capacity(self.levels.len());
        let mut aux = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            h = self.config.squeeze.forward(ctx.g, h)?;
            for step in &level.steps {
                let out = step.forward(ctx, h, None, ld)?;
                h = out.0;
                ld = out.1;
            }
            let (y_l, a_l) = split_channels(ctx.g, h, level.dims.keep)?;
            ys.push(y_l);
            aux.push(a_l);
            h = y_l;
        }
        let feats = self.conditional_features(ctx, &ys)?;
        let mut z: Vec<Option<Var>> = vec![None; self.levels.len()];
        for li in (0..self.levels.len()).rev() {
            let mut a = aux[li];
            for step in &self.levels[li].cond_steps {
                let out = step.forward(ctx, a, feats[li], ld)?;
                a = out.0;
                ld = out.1;
            }
            z[li] = Some(a);
        }
        Ok(Decomposition {
            y: ys[self.levels.len() - 1],
            z: z.into_iter().map(|v| v.expect("all levels visited")).collect(),
            logdet: ld,
        })
    }

    /// (y*, z_1..z_L) → x. Exact inverse of [`Self::forward_decompose`].
    pub fn inverse_generate<R: Real>(
        &self,
        ctx: &mut PassCtx<R>,
        y_star: Var,
        z: &[Var],
    ) -> Result<Var> {
        let nlev = self.levels.len();
        let sy = ctx.g.shape(y_star);
        if sy.c != 3 {
            return Err(Error::shape(
                "inverse_generate",
                format!("LR input must have 3 channels, got {}", sy.c),
            ));
        }
        if z.len() != nlev {
            return Err(Error::invalid(
                "inverse_generate",
                format!("expected {nlev} latent tensors, got {}", z.len()),
            ));
        }
        for (li, &zv) in z.iter().enumerate() {
            let expected = Shape4::new(
                sy.b,
                self.levels[li].dims.aux,
                sy.h << (nlev - 1 - li),
                sy.w << (nlev - 1 - li),
            );
            let got = ctx.g.shape(zv);
            if got != expected {
                return Err(Error::LatentShape {
                    level: li + 1,
                    expected: expected.to_string(),
                    got: got.to_string(),
                });
            }
        }
        let mut ld = zero_logdet(ctx.g, sy.b);
        let mut feats: Vec<Option<Var>> = vec![None; nlev];
        let mut y_l = y_star;
        for li in (0..nlev).rev() {
            feats[li] = self.feature_for_level(ctx, li, y_l, &feats)?;
            let mut a = z[li];
            for step in self.levels[li].cond_steps.iter().rev() {
                let out = step.inverse(ctx, a, feats[li], ld)?;
                a = out.0;
                ld = out.1;
            }
            let mut h = ctx.g.concat_channels(&[y_l, a])?;
            for step in self.levels[li].steps.iter().rev() {
                let out = step.inverse(ctx, h, None, ld)?;
                h = out.0;
                ld = out.1;
            }
            y_l = self.config.squeeze.inverse(ctx.g, h)?;
        }
        Ok(y_l)
    }

    /// Runs one data-dependent initialization pass: every actnorm replaces
    /// its scale/bias from the incoming batch statistics, in topological
    /// order. Call once on the first training batch before any optimizer
    /// step.
    pub fn init_actnorms(&self, store: &mut ParamStore, batch: &Tensor4) -> Result<()> {
        let mut g: Graph<f32> = Graph::new();
        let mut ctx = PassCtx::new(&mut g, store, false);
        ctx.actnorm_init = true;
        let x = ctx.g.constant(batch.clone());
        self.forward_decompose(&mut ctx, x)?;
        Ok(())
    }
}

/// Perturbs parameters away from the identity for invertibility and Jacobian
/// testing: modest actnorm statistics, near-identity channel mixing, and
/// coupling-head output layers small enough that scale maps stay clear of
/// sigmoid saturation. Hidden layers keep their fan-in-scaled weights, but
/// their biases are jittered off zero: with a zero bias, a spatial position
/// whose incoming activations are all relu-dead has a pre-activation of
/// exactly 0.0, parking the next relu on its kink where finite-difference
/// probes straddle the two one-sided slopes.
pub fn randomize_for_test(store: &mut ParamStore, rng: &mut SplitMix64) {
    for i in 0..store.len() {
        let id = store.id_at(i);
        let name = store.name(id).to_string();
        let cur = store.value(id).clone();
        let next = if name.ends_with("actnorm/scale") {
            Tensor4::from_fn(cur.shape(), |_, _, _, _| {
                0.7 + 0.6 * rng.uniform() as f32
            })
        } else if name.ends_with("actnorm/bias") {
            Tensor4::from_fn(cur.shape(), |_, _, _, _| 0.3 * rng.normal() as f32)
        } else if name.ends_with("mix/w") {
            Tensor4::from_fn(cur.shape(), |o, c, _, _| {
                let eye = if o == c { 1.0 } else { 0.0 };
                eye + 0.1 * rng.normal() as f32
            })
        } else if name.ends_with("head/c3/w") {
            let s = cur.shape();
            let std = 0.25 / ((s.c * s.h * s.w) as f64).sqrt();
            Tensor4::from_fn(s, |_, _, _, _| (std * rng.normal()) as f32)
        } else if name.ends_with("head/c1/b")
            || name.ends_with("head/c2/b")
            || name.ends_with("head/c3/b")
        {
            Tensor4::from_fn(cur.shape(), |_, _, _, _| 0.05 * rng.normal() as f32)
        } else {
            continue;
        };
        store.set(id, next).expect("same shape");
    }
}
