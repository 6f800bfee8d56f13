use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffenc::config::{Overrides, RunConfig};
use diffenc::encoder::channel_sum;
use diffenc::io::{format_f64, pgm, ppm, to_grey, write_atomic, Csv};
use diffenc::nn::checkpoint;
use diffenc::sampler::{ancestral_sample, SamplerConfig};
use diffenc::train::{breakdown_csv, checkpoint_path, evaluate, train};
use diffenc::verify::{reports_csv, run_suite, summary_table, SuiteOptions};
use diffenc::{EncoderKind, Error, Result};

#[derive(Parser)]
#[command(name = "diffenc", version, about = "Diffusion models with a time-dependent encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// identity | nt | trainable
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long, allow_hyphen_values = true)]
    lambda_max: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda_min: Option<f64>,
    /// on | off
    #[arg(long, value_parser = parse_on_off)]
    counterterm: Option<bool>,
    #[arg(long)]
    n_mc: Option<usize>,
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a loss curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Loss breakdown in bits per dimension for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out-dir>/checkpoint.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Ancestral samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of chains (defaults to the config value).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Per-time encoder change maps (x_t - x_s)/(t - s).
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of datapoints to map.
        #[arg(long, default_value_t = 8)]
        items: usize,
        /// Number of time intervals on [0, 1].
        #[arg(long, default_value_t = 10)]
        intervals: usize,
    },
    /// Table of t, λ, α, σ and SNR along the schedule.
    ScheduleReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
    /// Run the numerical oracle suite; exits 1 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Smaller sample sizes.
        #[arg(long)]
        quick: bool,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        steps: c.steps,
        encoder: c.encoder,
        lambda_max: c.lambda_max,
        lambda_min: c.lambda_min,
        counterterm: c.counterterm,
        n_mc: c.n_mc,
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&overrides(c))?;
    Ok(cfg)
}

/// Loads a checkpoint together with the configuration it records, with
/// `--config` and flags applied on top. Architecture and schedule always
/// come from the checkpoint.
fn load_run(c: &Common, ckpt: Option<&Path>) -> Result<(checkpoint::Checkpoint, RunConfig)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(&cfg.out_dir));
    if !path.exists() {
        return Err(Error::config(format!("checkpoint {} not found", path.display())));
    }
    let ck = checkpoint::load(&path)?;
    if c.config.is_none() {
        if let Some(text) = &ck.config {
            cfg = RunConfig::from_toml(text)?;
        }
    }
    cfg.apply(&overrides(c))?;
    cfg.model.encoder = ck.model.kind();
    cfg.schedule.lambda_max = ck.model.schedule.lambda_max;
    cfg.schedule.lambda_min = ck.model.schedule.lambda_min;
    Ok((ck, cfg))
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = cfg.out_dir.clone();
    println!("config_hash={}", cfg.hash());
    println!("{:>8}  {:>12}  {:>12}  {:>12}  {:>12}  {:>8}", "step", "diffusion", "latent", "recon", "total", "bpd");
    let outcome = train(&cfg, Some(&out), &mut |r| {
        println!(
            "{:>8}  {:>12.6}  {:>12.3e}  {:>12.3e}  {:>12.6}  {:>8.4}",
            r.step, r.diffusion, r.latent, r.reconstruction, r.total, r.bpd
        )
    })?;
    println!(
        "eval total: {:.6} bpd at init, {:.6} bpd after {} steps",
        outcome.initial_eval.bpd, outcome.final_eval.bpd, cfg.train.steps
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(c: &Common, ckpt: Option<&Path>) -> Result<()> {
    let (ck, cfg) = load_run(c, ckpt)?;
    let data = cfg.eval_data()?;
    let hash = cfg.hash();
    let b = evaluate(&ck.model, &data, cfg.eval.n_mc, cfg.eval.max_points, cfg.counterterm(), cfg.seed)?;
    println!("config_hash={hash}");
    let points = match cfg.eval.max_points {
        0 => data.len(),
        m => m.min(data.len()),
    };
    println!("encoder={} n_mc={} points={points}", ck.model.kind(), cfg.eval.n_mc);
    println!("{:>10}  {:>10}  {:>18}  {:>14}", "Total", "Latent", "Diffusion", "Reconstruction");
    println!(
        "{:>10.5}  {:>10.6}  {:>9.5} ± {:<6.5}  {:>14.6}",
        b.bpd,
        b.bits(b.latent),
        b.bits(b.diffusion),
        b.bits(b.diffusion_std_error),
        b.bits(b.reconstruction)
    );
    let path = cfg.out_dir.join("eval_report.csv");
    breakdown_csv(&[(ck.model.kind().as_str(), &b)], &hash).write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Image shape `(height, width, channels)` when the data are images.
fn image_shape(cfg: &RunConfig, dim: usize) -> Option<(usize, usize, usize)> {
    let dims = match &cfg.sample.image_dims {
        Some(d) => d.clone(),
        None => cfg.data.path.as_ref().and_then(|p| diffenc::data::load_idx(p).ok()).map(|d| d.dims)?,
    };
    let shape = match dims.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] if *c == 1 || *c == 3 => (*h, *w, *c),
        _ => return None,
    };
    (shape.0 * shape.1 * shape.2 == dim).then_some(shape)
}

/// Tiles `n` images into a near-square grid with a one-pixel border.
fn tile(pixels: &[u8], n: usize, (h, w, c): (usize, usize, usize)) -> (usize, usize, Vec<u8>) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let gw = cols * (w + 1) + 1;
    let gh = rows * (h + 1) + 1;
    let mut out = vec![0u8; gw * gh * c];
    for k in 0..n {
        let (r0, c0) = (1 + (k / cols) * (h + 1), 1 + (k % cols) * (w + 1));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    out[((r0 + i) * gw + c0 + j) * c + ch] = pixels[k * h * w * c + (i * w + j) * c + ch];
                }
            }
        }
    }
    (gw, gh, out)
}

fn cmd_sample(c: &Common, ckpt: Option<&Path>, n: Option<usize>) -> Result<()> {
    let (ck, cfg) = load_run(c, ckpt)?;
    let mut cfg = cfg;
    // For sampling, --steps sets the number of reverse steps T.
    if let Some(t) = c.steps {
        cfg.sample.steps = t;
    }
    let hash = cfg.hash();
    let n = n.unwrap_or(cfg.sample.n);
    let mut sc = SamplerConfig::new(cfg.sample.steps, cfg.counterterm(), cfg.seed);
    sc.trajectory_every = (cfg.sample.steps / 16).max(1);
    let out = ancestral_sample(&ck.model, &ck.model.schedule, &sc, n)?;
    let d = out.dim;
    let dir = &cfg.out_dir;

    let mut csv = Csv::new(&["chain", "coord", "z0", "pixel"]).with_hash(&hash);
    for i in 0..n {
        for j in 0..d {
            csv.push(vec![
                i.to_string(),
                j.to_string(),
                format_f64(out.z0[i * d + j]),
                out.pixels[i * d + j].to_string(),
            ]);
        }
    }
    csv.write(&dir.join("samples.csv"))?;
    let mut traj = Csv::new(&["step", "t", "mean_sq_norm"]).with_hash(&hash);
    for r in &out.trajectory {
        traj.push(vec![r.step.to_string(), format_f64(r.t), format_f64(r.mean_sq_norm)]);
    }
    traj.write(&dir.join("sample_trajectory.csv"))?;

    match image_shape(&cfg, d) {
        Some(shape) => {
            let (gw, gh, grid) = tile(&out.pixels, n, shape);
            let (bytes, name) = if shape.2 == 3 {
                (ppm(gw, gh, &grid, Some(&hash))?, "samples.ppm")
            } else {
                (pgm(gw, gh, &grid, Some(&hash))?, "samples.pgm")
            };
            write_atomic(&dir.join(name), &bytes)?;
        }
        None if d == 2 => {
            // 2-D data: a 256 × 256 histogram of the decoded values.
            let mut counts = vec![0.0; 256 * 256];
            for p in out.pixels.chunks_exact(2) {
                counts[(255 - p[1] as usize) * 256 + p[0] as usize] += 1.0;
            }
            let img = to_grey(&counts, false);
            write_atomic(&dir.join("samples.pgm"), &pgm(256, 256, &img, Some(&hash))?)?;
        }
        None => {}
    }
    println!("config_hash={hash}");
    println!("{n} samples with T = {} written to {}", cfg.sample.steps, dir.display());
    Ok(())
}

fn cmd_heatmap(c: &Common, ckpt: Option<&Path>, items: usize, intervals: usize) -> Result<()> {
    if intervals == 0 || items == 0 {
        return Err(Error::config("heatmap needs at least one item and one interval"));
    }
    let (ck, cfg) = load_run(c, ckpt)?;
    let hash = cfg.hash();
    let data = cfg.eval_data()?;
    let d = ck.model.dim();
    if data.dim() != d {
        return Err(Error::config("dataset dimension does not match the checkpoint"));
    }
    let items = items.min(data.len());
    let enc = ck.model.encoder_spec();
    let (h, w, ch) = image_shape(&cfg, d).unwrap_or((1, d, 1));
    // Channel-major maps for channel_sum.
    let to_channel_major = |m: &[f64]| -> Vec<f64> {
        let px = h * w;
        let mut out = vec![0.0; m.len()];
        for p in 0..px {
            for c in 0..ch {
                out[c * px + p] = m[p * ch + c];
            }
        }
        out
    };
    let mut raw = Csv::new(&["item", "s", "t", "coord", "rate"]).with_hash(&hash);
    let mut maps = Vec::with_capacity(items * intervals);
    for i in 0..items {
        let x = data.item_real(i);
        for k in 0..intervals {
            let s = k as f64 / intervals as f64;
            let t = (k + 1) as f64 / intervals as f64;
            let m = enc.change_heatmap(&x, &ck.model.schedule, s, t)?;
            for (j, v) in m.iter().enumerate() {
                raw.push(vec![i.to_string(), format_f64(s), format_f64(t), j.to_string(), format_f64(*v)]);
            }
            maps.push(channel_sum(&to_channel_major(&m), ch)?);
        }
    }
    raw.write(&cfg.out_dir.join("heatmap.csv"))?;
    // Grid: one row per item, one column per interval, shared grey scale.
    let all: Vec<f64> = maps.iter().flatten().copied().collect();
    let grey = to_grey(&all, true);
    let px = h * w;
    let gw = intervals * (w + 1) + 1;
    let gh = items * (h + 1) + 1;
    let mut img = vec![0u8; gw * gh];
    for i in 0..items {
        for k in 0..intervals {
            let m = &grey[(i * intervals + k) * px..(i * intervals + k + 1) * px];
            for r in 0..h {
                for col in 0..w {
                    img[(1 + i * (h + 1) + r) * gw + 1 + k * (w + 1) + col] = m[r * w + col];
                }
            }
        }
    }
    write_atomic(&cfg.out_dir.join("heatmap.pgm"), &pgm(gw, gh, &img, Some(&hash))?)?;
    let max = all.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    println!("config_hash={hash}");
    println!("encoder={} max |rate| = {max:e}", ck.model.kind());
    println!("wrote heatmap.csv and heatmap.pgm to {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_schedule_report(c: &Common, points: usize) -> Result<()> {
    if points < 2 {
        return Err(Error::config("schedule report needs at least 2 points"));
    }
    let cfg = resolve(c)?;
    let sched = cfg.schedule()?;
    let hash = cfg.hash();
    let mut csv = Csv::new(&["t", "lambda", "alpha", "sigma", "snr"]).with_hash(&hash);
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let p = sched.eval(t)?;
        csv.push_f64(&[t, p.lambda, p.alpha, p.sigma, p.snr]);
    }
    let path = cfg.out_dir.join("schedule.csv");
    csv.write(&path)?;
    println!("config_hash={hash}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_verify(c: &Common, quick: bool) -> Result<bool> {
    let cfg = resolve(c)?;
    let reports = run_suite(SuiteOptions { seed: cfg.seed, quick });
    print!("{}", summary_table(&reports));
    let path = cfg.out_dir.join("verify.csv");
    reports_csv(&reports).with_hash(&cfg.hash()).write(&path)?;
    println!("wrote {}", path.display());
    Ok(reports.iter().all(|r| r.pass))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common } => cmd_train(common).map(|_| true),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()).map(|_| true),
        Command::Sample { common, checkpoint, n } => cmd_sample(common, checkpoint.as_deref(), *n).map(|_| true),
        Command::Heatmap {
            common,
            checkpoint,
            items,
            intervals,
        } => cmd_heatmap(common, checkpoint.as_deref(), *items, *intervals).map(|_| true),
        Command::ScheduleReport { common, points } => cmd_schedule_report(common, *points).map(|_| true),
        Command::Verify { common, quick } => cmd_verify(common, *quick),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
