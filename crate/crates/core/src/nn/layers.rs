use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::params::{ParamId, ParamStore, Tensor};
use crate::nn::tape::{Graph, Var};

/// Sinusoidal embedding of a batch of log-SNR values: for each frequency
/// `ω_k = 2^k / 16` the pair `(sin ω_k λ, cos ω_k λ)`. Output is
/// `lambdas.len() × 2·n_freq`, row-major.
pub fn lambda_embedding(lambdas: &[f64], n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(lambdas.len() * 2 * n_freq);
    for &l in lambdas {
        for k in 0..n_freq {
            let w = (1u64 << k) as f64 / 16.0;
            out.push((w * l).sin());
            out.push((w * l).cos());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// LeCun-normal weights, zero bias; `zero` gives an all-zero layer.
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = (1.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| {
                if zero {
                    0.0
                } else {
                    scale * rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect();
        let weight = store.insert(&format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
        let bias = store.insert(&format!("{name}.bias"), Tensor::zeros(vec![1, fan_out]))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w);
        g.add_bias(h, b)
    }
}

/// Multi-layer perceptron with SiLU activations, residual connections between
/// equal-width hidden layers, and a zero-initialized output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub residual: bool,
}

impl Mlp {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::build(store, &format!("{prefix}.hidden{i}"), fan_in, h, false, rng)?);
            fan_in = h;
        }
        layers.push(Linear::build(store, &format!("{prefix}.out"), fan_in, output, true, rng)?);
        Ok(Mlp { layers, residual })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Var {
        let (hidden, out) = self.layers.split_at(self.layers.len() - 1);
        let mut h = input;
        for layer in hidden {
            let pre = layer.forward(g, store, h);
            let act = g.silu(pre);
            h = if self.residual && layer.fan_in == layer.fan_out {
                g.add(h, act)
            } else {
                act
            };
        }
        out[0].forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_shape_and_values() {
        let e = lambda_embedding(&[0.0, 1.0], 3);
        assert_eq!(e.len(), 12);
        assert_eq!(&e[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((e[6] - (1.0f64 / 16.0).sin()).abs() < 1e-15);
        assert!((e[10] - (4.0f64 / 16.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::build(&mut store, "m", 4, &[8, 8], 2, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![0.3; 12], 3, 4);
        let y = mlp.forward(&mut g, &store, x);
        assert_eq!(g.shape(y), (3, 2));
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        assert_eq!(mlp.input_dim(), 4);
        assert_eq!(mlp.output_dim(), 2);
    }
}
