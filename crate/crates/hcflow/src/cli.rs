//! Command-line interface: training, generation, rescaling, evaluation, and
//! the built-in invariant suite.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataio::{load_png, metrics, save_png, MetricReport};
use crate::error::{Error, Result};
use crate::model::HcFlow;
use crate::numerics::{Graph, ParamStore, PassCtx, Shape4, SplitMix64, Tensor4, Var};
use crate::objective::sample_latents;
use crate::runner::{load_checkpoint, load_dataset, train_from, TrainConfig};
use crate::selftest;

#[derive(Parser)]
#[command(
    name = "hcflow",
    version,
    about = "Hierarchical conditional flow for stochastic super-resolution and invertible rescaling",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file
    Train(TrainArgs),
    /// Super-resolve a low-resolution image with a trained checkpoint
    Sr(SrArgs),
    /// Decompose a high-resolution image into its LR image and latents
    RescaleDown(RescaleDownArgs),
    /// Reconstruct a high-resolution image from an LR image and latents
    RescaleUp(RescaleUpArgs),
    /// Evaluate a checkpoint over a directory of images
    Eval(EvalArgs),
    /// Run the built-in invariant suite; exits nonzero on any failure
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// Plain-text `key = value` training config
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    out: PathBuf,
    /// Fine-tune from an existing checkpoint instead of fresh initialization
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct SrArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Low-resolution input image (8-bit RGB PNG)
    #[arg(long)]
    lr: PathBuf,
    /// Sampling temperature; 0 is deterministic
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    /// Number of samples to generate
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Output directory (sample PNGs, metrics when --hr is given)
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth high-resolution image; enables metrics
    #[arg(long)]
    hr: Option<PathBuf>,
}

#[derive(Args)]
struct RescaleDownArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// High-resolution input image (8-bit RGB PNG)
    #[arg(long)]
    hr: PathBuf,
    /// Output directory (lr.png + latents.hcfz)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RescaleUpArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Low-resolution input image (8-bit RGB PNG)
    #[arg(long)]
    lr: PathBuf,
    /// Latents file written by rescale-down; exact reconstruction
    #[arg(long, conflicts_with = "tau")]
    latents: Option<PathBuf>,
    /// Sample fresh latents at this temperature instead
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Output directory (hr.png)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of high-resolution PNGs (LR counterparts derived by bicubic
    /// downscaling at the model's scale factor), or `toy` for the held-out
    /// synthetic split
    #[arg(long)]
    dir: PathBuf,
    /// Sampling temperature
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
}

/// Entry point behind `main`; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders usage/help itself; --help and --version exit zero
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Sr(a) => cmd_sr(&a),
        Command::RescaleDown(a) => cmd_rescale_down(&a),
        Command::RescaleUp(a) => cmd_rescale_up(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Selftest => return cmd_selftest(),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("config {}: {e}", a.config.display())))?;
    let cfg = TrainConfig::from_text(&text)?;
    let outcome = train_from(&cfg, &a.out, a.init_ckpt.as_deref())?;
    println!(
        "trained {} steps; checkpoint at {}",
        outcome.final_step,
        outcome.checkpoint.display()
    );
    Ok(())
}

/// Loads a checkpoint and rebuilds its model with installed parameters.
fn model_from_ckpt(path: &Path) -> Result<(HcFlow, ParamStore)> {
    load_checkpoint(path)?.build_model()
}

/// Seed for sampling subcommands: `HCFLOW_SEED` when set, else a fixed
/// default so repeated invocations are reproducible.
fn sampling_seed() -> Result<u64> {
    match std::env::var("HCFLOW_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("HCFLOW_SEED must be a u64, got '{v}'"))),
        Err(_) => Ok(0xC0FFEE),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("out dir {}: {e}", dir.display())))
}

/// One inverse generation pass from an LR tensor and latent draws.
fn generate(
    model: &HcFlow,
    store: &mut ParamStore,
    lr: &Tensor4,
    latents: &[Tensor4],
) -> Result<Tensor4> {
    let mut g: Graph<f32> = Graph::new();
    let mut ctx = PassCtx::new(&mut g, store, false);
    let yv = ctx.g.constant(lr.clone());
    let zv: Vec<Var> = latents.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let x = model.inverse_generate(&mut ctx, yv, &zv)?;
    Ok(g.data(x).clone())
}

/// Forward decomposition of an HR tensor into (generated LR, latents).
fn decompose(
    model: &HcFlow,
    store: &mut ParamStore,
    hr: &Tensor4,
) -> Result<(Tensor4, Vec<Tensor4>)> {
    let mut g: Graph<f32> = Graph::new();
    let mut ctx = PassCtx::new(&mut g, store, false);
    let xv = ctx.g.constant(hr.clone());
    let d = model.forward_decompose(&mut ctx, xv)?;
    let y = g.data(d.y).clone();
    let z = d.z.iter().map(|&v| g.data(v).clone()).collect();
    Ok((y, z))
}

fn hr_shape_for_lr(model: &HcFlow, lr: Shape4) -> Shape4 {
    let sf = model.config.scale_factor();
    Shape4::new(lr.b, 3, lr.h * sf, lr.w * sf)
}

fn cmd_sr(a: &SrArgs) -> Result<()> {
    let (model, mut store) = model_from_ckpt(&a.ckpt)?;
    let lr = load_png(&a.lr)?;
    ensure_dir(&a.out)?;
    let hr_shape = hr_shape_for_lr(&model, lr.shape());
    let mut rng = SplitMix64::new(sampling_seed()?);
    let mut outputs = Vec::with_capacity(a.samples);
    for i in 0..a.samples {
        let z = sample_latents(&model, hr_shape, a.tau, &mut rng)?;
        let x = generate(&model, &mut store, &lr, &z)?;
        let path = a.out.join(format!("sample_{i:02}.png"));
        save_png(&x, &path)?;
        println!("wrote {}", path.display());
        outputs.push(x);
    }
    if let Some(hr_path) = &a.hr {
        let hr = load_png(hr_path)?;
        let (y_gen, _) = decompose(&model, &mut store, &hr)?;
        let report = metrics(&outputs, &hr, &lr, Some(&y_gen))?;
        print!("{}", report.to_key_values());
        write_reports(&a.out, &report)?;
    }
    Ok(())
}

fn write_reports(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::write(dir.join("metrics.txt"), report.to_key_values())
        .map_err(|e| Error::Config(format!("metrics.txt: {e}")))?;
    fs::write(dir.join("metrics.json"), report.to_json())
        .map_err(|e| Error::Config(format!("metrics.json: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Latents file format
// ---------------------------------------------------------------------------

const LATENTS_MAGIC: &[u8; 4] = b"HCFZ";
const LATENTS_VERSION: u32 = 1;

/// Serializes latent tensors: magic, u32 version, u32 count, then per tensor
/// 4×u32 dims and f32 little-endian data.
pub fn write_latents(path: &Path, latents: &[Tensor4]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(LATENTS_MAGIC);
    out.extend_from_slice(&LATENTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(latents.len() as u32).to_le_bytes());
    for t in latents {
        let s = t.shape();
        for d in [s.b, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::Config(format!("latents {}: {e}", path.display())))
}

/// Reads a latents file written by [`write_latents`].
pub fn read_latents(path: &Path) -> Result<Vec<Tensor4>> {
    let bytes =
        fs::read(path).map_err(|e| Error::Config(format!("latents {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("latents file is truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes(s.try_into().expect("4-byte slice")))
    };
    if take(&mut pos, 4)? != LATENTS_MAGIC {
        return Err(Error::Checkpoint("latents file: bad magic".into()));
    }
    let version = u32_at(&mut pos)?;
    if version != LATENTS_VERSION {
        return Err(Error::Checkpoint(format!(
            "latents file version {version}, expected {LATENTS_VERSION}"
        )));
    }
    let count = u32_at(&mut pos)? as usize;
    let mut latents = Vec::with_capacity(count);
    for _ in 0..count {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32_at(&mut pos)? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape.numel();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let s = take(&mut pos, 4)?;
            data.push(f32::from_le_bytes(s.try_into().expect("4-byte slice")));
        }
        latents.push(Tensor4::from_vec(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "latents file has {} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(latents)
}

fn cmd_rescale_down(a: &RescaleDownArgs) -> Result<()> {
    let (model, mut store) = model_from_ckpt(&a.ckpt)?;
    let hr = load_png(&a.hr)?;
    ensure_dir(&a.out)?;
    let (y, z) = decompose(&model, &mut store, &hr)?;
    let lr_path = a.out.join("lr.png");
    save_png(&y, &lr_path)?;
    let z_path = a.out.join("latents.hcfz");
    write_latents(&z_path, &z)?;
    println!("wrote {} and {}", lr_path.display(), z_path.display());
    Ok(())
}

fn cmd_rescale_up(a: &RescaleUpArgs) -> Result<()> {
    let (model, mut store) = model_from_ckpt(&a.ckpt)?;
    let lr = load_png(&a.lr)?;
    ensure_dir(&a.out)?;
    let hr_shape = hr_shape_for_lr(&model, lr.shape());
    let z = match &a.latents {
        Some(path) => {
            let z = read_latents(path)?;
            let expected = model.latent_shapes(hr_shape)?;
            if z.len() != expected.len() {
                return Err(Error::invalid(
                    "rescale_up",
                    format!("latents file has {} tensors, model expects {}", z.len(), expected.len()),
                ));
            }
            for (i, (t, e)) in z.iter().zip(&expected).enumerate() {
                if t.shape() != *e {
                    return Err(Error::LatentShape {
                        level: i + 1,
                        expected: e.to_string(),
                        got: t.shape().to_string(),
                    });
                }
            }
            z
        }
        None => {
            let mut rng = SplitMix64::new(sampling_seed()?);
            sample_latents(&model, hr_shape, a.tau, &mut rng)?
        }
    };
    let x = generate(&model, &mut store, &lr, &z)?;
    let path = a.out.join("hr.png");
    save_png(&x, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, mut store) = model_from_ckpt(&a.ckpt)?;
    let spec = a.dir.to_string_lossy();
    let pairs = load_dataset(&spec, model.config.scale_factor(), true, 32)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {spec}")));
    }
    let mut rng = SplitMix64::new(sampling_seed()?);
    println!("image                      psnr_rgb  psnr_y    ssim    lr_psnr  consistency  diversity");
    let mut sums = [0.0f64; 6];
    for pair in &pairs {
        let hr_shape = pair.hr.shape();
        let mut samples = Vec::with_capacity(5);
        for _ in 0..5 {
            let z = sample_latents(&model, hr_shape, a.tau, &mut rng)?;
            samples.push(generate(&model, &mut store, &pair.lr, &z)?);
        }
        let (y_gen, _) = decompose(&model, &mut store, &pair.hr)?;
        let r = metrics(&samples, &pair.hr, &pair.lr, Some(&y_gen))?;
        let lr_psnr = r.lr_psnr.expect("model_y was supplied");
        let name = Path::new(&pair.source)
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| pair.source.clone());
        println!(
            "{name:<26} {:>8.3} {:>7.3} {:>7.4} {:>8.3} {:>12.3} {:>10.6}",
            r.psnr_rgb, r.psnr_y, r.ssim, lr_psnr, r.consistency, r.diversity
        );
        for (s, v) in sums.iter_mut().zip([
            r.psnr_rgb,
            r.psnr_y,
            r.ssim,
            lr_psnr,
            r.consistency,
            r.diversity,
        ]) {
            *s += v;
        }
    }
    let n = pairs.len() as f64;
    println!(
        "{:<26} {:>8.3} {:>7.3} {:>7.4} {:>8.3} {:>12.3} {:>10.6}",
        format!("mean ({} images)", pairs.len()),
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n,
        sums[5] / n
    );
    Ok(())
}

fn cmd_selftest() -> i32 {
    let (_, failed) = selftest::run_all(|line| println!("{line}"));
    if failed == 0 {
        0
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latents_file_round_trips_bitwise() {
        let dir = std::env::temp_dir().join(format!("hcflow-latents-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("z.hcfz");
        let mut rng = SplitMix64::new(99);
        let latents = vec![
            Tensor4::from_fn(Shape4::new(1, 6, 4, 4), |_, _, _, _| rng.normal() as f32),
            Tensor4::from_fn(Shape4::new(1, 21, 2, 2), |_, _, _, _| rng.normal() as f32),
        ];
        write_latents(&path, &latents).unwrap();
        let back = read_latents(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in latents.iter().zip(&back) {
            assert_eq!(a.shape(), b.shape());
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn latents_file_rejects_corruption() {
        let dir = std::env::temp_dir().join(format!("hcflow-latents-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("z.hcfz");
        let latents = vec![Tensor4::zeros(Shape4::new(1, 2, 2, 2))];
        write_latents(&path, &latents).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match read_latents(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("bad magic"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        // truncation
        write_latents(&path, &latents).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_latents(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_flags_and_subcommands_exit_nonzero() {
        assert_ne!(run(["hcflow", "sr", "--bogus"]), 0);
        assert_ne!(run(["hcflow", "frobnicate"]), 0);
        assert_ne!(run(["hcflow"]), 0);
        assert_ne!(run(["hcflow", "train"]), 0, "missing required flags");
    }

    #[test]
    fn missing_files_exit_nonzero() {
        assert_eq!(
            run([
                "hcflow",
                "train",
                "--config",
                "/nonexistent/config.txt",
                "--out",
                "/tmp/hcflow-nonexistent-out",
            ]),
            1
        );
        assert_eq!(
            run([
                "hcflow",
                "sr",
                "--ckpt",
                "/nonexistent/ckpt.hcfl",
                "--lr",
                "/nonexistent/lr.png",
                "--out",
                "/tmp/hcflow-nonexistent-out",
            ]),
            1
        );
    }
}
