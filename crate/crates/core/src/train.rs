//! Single-process training loop: Adam on the batch-mean training loss,
//! interval-averaged loss curve, periodic checkpoints and a fixed-noise
//! evaluation before and after.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::io::Csv;
use crate::nn::checkpoint;
use crate::nn::model::DiffEncModel;
use crate::nn::optim::{optimizer_step, AdamConfig};
use crate::nn::tape::Graph;
use crate::objective::{elbo_bpd, training_loss, LossBreakdown, TrainingDraws};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub diffusion: f64,
    pub latent: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub bpd: f64,
}

pub fn curve_csv(rows: &[CurveRow], hash: &str) -> Csv {
    let mut c = Csv::new(&["step", "diffusion", "latent", "reconstruction", "total", "bpd"]).with_hash(hash);
    for r in rows {
        c.push(vec![
            r.step.to_string(),
            crate::io::format_f64(r.diffusion),
            crate::io::format_f64(r.latent),
            crate::io::format_f64(r.reconstruction),
            crate::io::format_f64(r.total),
            crate::io::format_f64(r.bpd),
        ]);
    }
    c
}

pub fn breakdown_csv(rows: &[(&str, &LossBreakdown)], hash: &str) -> Csv {
    let mut c = Csv::new(&[
        "label",
        "total_bpd",
        "latent_bpd",
        "diffusion_bpd",
        "diffusion_se_bpd",
        "reconstruction_bpd",
        "total_nats",
    ])
    .with_hash(hash);
    for (label, b) in rows {
        c.push(vec![
            label.to_string(),
            crate::io::format_f64(b.bpd),
            crate::io::format_f64(b.bits(b.latent)),
            crate::io::format_f64(b.bits(b.diffusion)),
            crate::io::format_f64(b.bits(b.diffusion_std_error)),
            crate::io::format_f64(b.bits(b.reconstruction)),
            crate::io::format_f64(b.total_nats),
        ]);
    }
    c
}

/// Negative ELBO of (a prefix of) `data` with noise drawn from `seed`, so
/// that two models evaluated with the same seed see the same draws.
pub fn evaluate(
    model: &DiffEncModel,
    data: &Dataset,
    n_mc: usize,
    max_points: usize,
    counterterm: bool,
    seed: u64,
) -> Result<LossBreakdown> {
    if data.dim() != model.dim() {
        return Err(Error::config(format!(
            "dataset dimension {} does not match model dimension {}",
            data.dim(),
            model.dim()
        )));
    }
    let pixels = data
        .pixels()
        .ok_or_else(|| Error::config("evaluation needs 8-bit pixel data"))?;
    let n = if max_points == 0 { data.len() } else { data.len().min(max_points) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    elbo_bpd(
        &pixels[..n * data.dim()],
        n,
        model,
        &model.encoder_spec(),
        &model.schedule,
        n_mc,
        counterterm,
        &mut rng,
    )
}

pub struct Trainer {
    pub model: DiffEncModel,
    adam: AdamConfig,
    counterterm: bool,
    batch_size: usize,
    data: Vec<u8>,
    dim: usize,
    sampler: BatchSampler,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let pixels = data
            .pixels()
            .ok_or_else(|| Error::config("training needs 8-bit pixel data"))?
            .to_vec();
        let dim = data.dim();
        let model = DiffEncModel::new(cfg.architecture(dim), cfg.schedule()?, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            adam: cfg.adam(),
            counterterm: cfg.counterterm(),
            batch_size: cfg.train.batch_size,
            data: pixels,
            dim,
            sampler: BatchSampler::new(data.len())?,
            rng,
        })
    }

    /// One optimizer update. On a non-finite loss or gradient the model is
    /// left as it was and `Error::Numerical` is returned.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let step = self.model.params.optimizer.step as usize + 1;
        let idx = self.sampler.next_batch(self.batch_size, &mut self.rng);
        let mut pixels = Vec::with_capacity(idx.len() * self.dim);
        for &i in &idx {
            pixels.extend_from_slice(&self.data[i * self.dim..(i + 1) * self.dim]);
        }
        let draws = TrainingDraws::sample(idx.len(), self.dim, &mut self.rng);
        let numerical = |e: Error| match e {
            Error::NonFinite { op, node } => Error::Numerical {
                step,
                msg: format!("non-finite value in {op} (node {node})"),
            },
            other => other,
        };
        let mut g = Graph::new();
        let (loss, breakdown) = training_loss(&mut g, &self.model, &pixels, &draws, self.counterterm).map_err(numerical)?;
        if !breakdown.total_nats.is_finite() {
            return Err(Error::Numerical {
                step,
                msg: "non-finite training loss".into(),
            });
        }
        let grads = g.backward(loss, &self.model.params).map_err(numerical)?;
        if !grads.all_finite() {
            return Err(Error::Numerical {
                step,
                msg: "non-finite gradient".into(),
            });
        }
        optimizer_step(&mut self.model.params, &grads, &self.adam).map_err(numerical)?;
        Ok(breakdown)
    }

    pub fn steps_done(&self) -> usize {
        self.model.params.optimizer.step as usize
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DiffEncModel,
    pub curve: Vec<CurveRow>,
    pub initial_eval: LossBreakdown,
    pub final_eval: LossBreakdown,
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.ckpt")
}

/// Runs `cfg.train.steps` updates. When `out_dir` is given, the resolved
/// config, loss curve, evaluation table and checkpoints are written there.
/// On a numerical abort the last good model is checkpointed before the error
/// is returned.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>, log: &mut dyn FnMut(&CurveRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let config_text = cfg.to_toml();
    let data = cfg.train_data()?;
    let eval_data = cfg.eval_data()?;
    let mut trainer = Trainer::new(cfg, &data)?;
    let ct = cfg.counterterm();
    let eval_seed = cfg.seed.wrapping_add(0x0e7a1);
    let save = |model: &DiffEncModel| -> Result<()> {
        match out_dir {
            Some(d) => checkpoint::save(&checkpoint_path(d), model, Some(&hash), Some(&config_text)),
            None => Ok(()),
        }
    };
    if let Some(d) = out_dir {
        crate::io::write_atomic(&d.join("config.toml"), format!("# config_hash={hash}\n{config_text}").as_bytes())?;
    }

    let initial_eval = evaluate(&trainer.model, &eval_data, cfg.eval.n_mc, cfg.eval.max_points, ct, eval_seed)?;
    let mut curve = Vec::new();
    let mut acc = [0.0; 4];
    let mut count = 0usize;
    let d = trainer.dim;
    for _ in 0..cfg.train.steps {
        let b = match trainer.step() {
            Ok(b) => b,
            Err(e) => {
                save(&trainer.model)?;
                if let Some(dir) = out_dir {
                    curve_csv(&curve, &hash).write(&dir.join("loss_curve.csv"))?;
                }
                return Err(e);
            }
        };
        acc[0] += b.diffusion;
        acc[1] += b.latent;
        acc[2] += b.reconstruction;
        acc[3] += b.total_nats;
        count += 1;
        let step = trainer.steps_done();
        if step % cfg.train.log_every == 0 || step == cfg.train.steps {
            let k = count as f64;
            let row = CurveRow {
                step,
                diffusion: acc[0] / k,
                latent: acc[1] / k,
                reconstruction: acc[2] / k,
                total: acc[3] / k,
                bpd: crate::objective::to_bpd(acc[3] / k, d),
            };
            log(&row);
            curve.push(row);
            acc = [0.0; 4];
            count = 0;
        }
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            save(&trainer.model)?;
        }
    }
    save(&trainer.model)?;
    let final_eval = evaluate(&trainer.model, &eval_data, cfg.eval.n_mc, cfg.eval.max_points, ct, eval_seed)?;
    if let Some(dir) = out_dir {
        curve_csv(&curve, &hash).write(&dir.join("loss_curve.csv"))?;
        breakdown_csv(&[("initial", &initial_eval), ("final", &final_eval)], &hash).write(&dir.join("eval.csv"))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        curve,
        initial_eval,
        final_eval,
    })
}
