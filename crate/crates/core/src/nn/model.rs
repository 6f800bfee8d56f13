//! Desk-scale networks: the v-prediction denoiser `v̂(z, λ)` and the
//! trainable encoder's inner network `y(x, λ)`, sharing one parameter store.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderKind, EncoderNetwork, EncoderSpec};
use crate::error::{Error, Result};
use crate::nn::layers::{lambda_embedding, Mlp};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Graph, Var};
use crate::predictor::Denoiser;
use crate::schedule::{LogLinearSchedule, SchedulePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Flattened data dimension.
    pub dim: usize,
    pub encoder: EncoderKind,
    pub denoiser_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    /// Number of sinusoidal frequencies in the λ embedding.
    pub n_freq: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            dim: 2,
            encoder: EncoderKind::Trainable,
            denoiser_hidden: vec![256, 256],
            encoder_hidden: vec![128, 128],
            n_freq: 8,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("model dimension must be positive"));
        }
        if self.denoiser_hidden.is_empty() || self.denoiser_hidden.contains(&0) {
            return Err(Error::config("denoiser needs at least one non-empty hidden layer"));
        }
        if self.encoder == EncoderKind::Trainable
            && (self.encoder_hidden.is_empty() || self.encoder_hidden.contains(&0))
        {
            return Err(Error::config("trainable encoder needs at least one non-empty hidden layer"));
        }
        Ok(())
    }
}

/// Denoiser plus optional encoder network.
#[derive(Debug)]
pub struct DiffEncModel {
    pub arch: Architecture,
    pub schedule: LogLinearSchedule,
    pub params: ParamStore,
    denoiser: Mlp,
    encoder_net: Option<Mlp>,
    denoiser_calls: AtomicUsize,
    encoder_calls: AtomicUsize,
}

impl Clone for DiffEncModel {
    fn clone(&self) -> Self {
        DiffEncModel {
            arch: self.arch.clone(),
            schedule: self.schedule,
            params: self.params.clone(),
            denoiser: self.denoiser.clone(),
            encoder_net: self.encoder_net.clone(),
            denoiser_calls: AtomicUsize::new(0),
            encoder_calls: AtomicUsize::new(0),
        }
    }
}

impl DiffEncModel {
    pub fn new(arch: Architecture, schedule: LogLinearSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let emb = 2 * arch.n_freq;
        let denoiser = Mlp::build(
            &mut params,
            "denoiser",
            arch.dim + emb,
            &arch.denoiser_hidden,
            arch.dim,
            true,
            &mut rng,
        )?;
        let encoder_net = if arch.encoder == EncoderKind::Trainable {
            Some(Mlp::build(
                &mut params,
                "encoder",
                arch.dim + emb,
                &arch.encoder_hidden,
                arch.dim,
                true,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(DiffEncModel {
            arch,
            schedule,
            params,
            denoiser,
            encoder_net,
            denoiser_calls: AtomicUsize::new(0),
            encoder_calls: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match
    /// the architecture exactly.
    pub fn from_params(arch: Architecture, schedule: LogLinearSchedule, params: ParamStore) -> Result<Self> {
        let mut model = DiffEncModel::new(arch, schedule, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} tensors, checkpoint has {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape != t2.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected `{n1}` {:?}, found `{n2}` {:?}",
                    t1.shape, t2.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn kind(&self) -> EncoderKind {
        self.arch.encoder
    }

    pub fn denoiser_calls(&self) -> usize {
        self.denoiser_calls.load(Ordering::SeqCst)
    }

    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.denoiser_calls.store(0, Ordering::SeqCst);
        self.encoder_calls.store(0, Ordering::SeqCst);
    }

    pub fn encoder_spec(&self) -> EncoderSpec<'_> {
        match self.arch.encoder {
            EncoderKind::Identity => EncoderSpec::identity(),
            EncoderKind::NonTrainable => EncoderSpec::non_trainable(),
            EncoderKind::Trainable => EncoderSpec::trainable(self, &self.schedule),
        }
    }

    fn conditioned_input(&self, g: &mut Graph, x: Var, lambdas: &[f64]) -> Var {
        let emb = lambda_embedding(lambdas, self.arch.n_freq);
        let e = g.constant(emb, lambdas.len(), 2 * self.arch.n_freq);
        g.concat_cols(x, e)
    }

    /// Records `v̂(z, λ)` for a batch; row `i` of `z` is at `lambdas[i]`.
    pub fn v_hat_graph(&self, g: &mut Graph, z: Var, lambdas: &[f64]) -> Var {
        self.denoiser_calls.fetch_add(1, Ordering::SeqCst);
        let input = self.conditioned_input(g, z, lambdas);
        self.denoiser.forward(g, &self.params, input)
    }

    /// Records `y(x, λ)`; `None` unless the encoder is trainable.
    pub fn y_graph(&self, g: &mut Graph, x: Var, lambdas: &[f64]) -> Option<Var> {
        let net = self.encoder_net.as_ref()?;
        self.encoder_calls.fetch_add(1, Ordering::SeqCst);
        let input = self.conditioned_input(g, x, lambdas);
        Some(net.forward(g, &self.params, input))
    }

    fn run_denoiser(&self, z: &[f64], lambdas: &[f64]) -> Result<Vec<f64>> {
        let n = lambdas.len();
        if z.len() != n * self.dim() {
            return Err(Error::domain(format!(
                "expected {} latent values, got {}",
                n * self.dim(),
                z.len()
            )));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.to_vec(), n, self.dim());
        let out = self.v_hat_graph(&mut g, zv, lambdas);
        g.check_finite()?;
        Ok(g.value(out).to_vec())
    }
}

impl Denoiser for DiffEncModel {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn predict_v_batch(&self, z: &[f64], n: usize, point: &SchedulePoint) -> Result<Vec<f64>> {
        self.run_denoiser(z, &vec![point.lambda; n])
    }

    fn predict_v_rows(&self, z: &[f64], points: &[SchedulePoint]) -> Result<Vec<f64>> {
        let lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
        self.run_denoiser(z, &lambdas)
    }
}

impl EncoderNetwork for DiffEncModel {
    fn y_rows(&self, x: &[f64], lambdas: &[f64]) -> Result<Vec<f64>> {
        let n = lambdas.len();
        if x.len() != n * self.dim() {
            return Err(Error::domain("encoder input does not match model dimension"));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.to_vec(), n, self.dim());
        let y = self
            .y_graph(&mut g, xv, lambdas)
            .ok_or_else(|| Error::config("model has no trainable encoder"))?;
        g.check_finite()?;
        Ok(g.value(y).to_vec())
    }
}
