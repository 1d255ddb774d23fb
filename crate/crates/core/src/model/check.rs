//! Finite-difference check of the composed training loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Ctx;
use super::{Dtrformer, ModelConfig, ParamStore};
use crate::data::{GraphPair, NormStats, SampleBatch};
use crate::error::Result;
use crate::metrics::mae_loss;
use crate::tensor::gradcheck::{grad_check_floored, GradCheckReport};
use crate::tensor::Tensor;

pub const GRAD_FLOOR: f64 = 1e-4;

/// A small random problem: model, batch, graphs and normalization.
#[derive(Clone, Debug)]
pub struct CheckInstance {
    pub model: Dtrformer<f64>,
    pub batch: SampleBatch<f64>,
    pub graphs: GraphPair,
    pub stats: NormStats,
}

/// `B = 2, T = 12, N = 4, C = 1, d_f = 4, d_a = d_n = 8, heads = 2, layers = 1`.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        nodes: 4,
        d_f: 4,
        d_a: 8,
        d_n: 8,
        heads: 2,
        layers: 1,
        ..ModelConfig::default()
    }
}

impl CheckInstance {
    pub fn new(config: ModelConfig, batch_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Dtrformer::<f64>::new(config.clone(), seed)?;
        let (b, t, n) = (batch_size, config.t_in, config.nodes);
        let x = Tensor::from_fn(&[b, t, n, config.c_in], |_| rng.random_range(-1.5..1.5));
        let y = Tensor::from_fn(&[b, config.t_out, n, config.c_out], |_| rng.random_range(40.0..160.0));
        let tod = (0..b * t).map(|_| rng.random_range(0..config.n_d)).collect();
        let dow = (0..b * t).map(|_| rng.random_range(0..7)).collect();
        let adj = Tensor::from_fn(&[n, n], |i| {
            if i / n == i % n {
                1.0
            } else if rng.random::<f64>() < 0.5 {
                rng.random_range(0.1..1.0)
            } else {
                0.0
            }
        });
        Ok(Self {
            model,
            batch: SampleBatch { x, y, tod, dow },
            graphs: GraphPair::from_adjacency(&adj)?,
            stats: NormStats {
                mean: vec![100.0; config.c_out.max(config.c_in)],
                std: vec![30.0; config.c_out.max(config.c_in)],
            },
        })
    }

    /// Compares the loss gradient with central differences on `count`
    /// parameter components drawn at random (all of them if `count` is
    /// at least the parameter count).
    ///
    /// Relative errors use a denominator of at least [`GRAD_FLOOR`]: with a
    /// loss near 30, rounding alone leaves about 1e-9 of absolute noise in
    /// a central difference at `eps = 1e-5`, and some attention query/key
    /// entries have gradients of that size.
    pub fn grad_check(&self, count: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
        let coords = random_coords(&self.model.params, count, seed);
        grad_check_floored(
            |tape, vars| {
                let ctx = Ctx::new(tape, vars);
                let out = self.model.forward(&ctx, &self.batch, &self.graphs, &self.stats)?;
                let y = tape.constant(self.batch.y.clone());
                mae_loss(tape, out.prediction, y)
            },
            self.model.params.values(),
            Some(&coords),
            eps,
            GRAD_FLOOR,
        )
    }
}

/// `count` distinct `(parameter, flat index)` pairs, uniform over all components.
pub fn random_coords(params: &ParamStore<f64>, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.values().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = sample(&mut rng, total, count.min(total)).into_vec();
    flat.sort_unstable();
    let mut out = Vec::with_capacity(flat.len());
    let (mut p, mut start) = (0, 0);
    for f in flat {
        while f >= start + sizes[p] {
            start += sizes[p];
            p += 1;
        }
        out.push((p, f - start));
    }
    out
}
