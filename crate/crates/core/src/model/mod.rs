//! The forecasting network.
//!
//! Parameters live in a [`ParamStore`]; the block structs below only hold
//! [`ParamId`]s, so the same architecture can be evaluated in 32-bit for
//! training and in 64-bit for gradient checks.

mod check;
mod config;
mod dst2former;
mod embedding;
mod fusion;
mod head;
mod layers;
mod params;

pub use check::{random_coords, small_config, CheckInstance, GRAD_FLOOR};
pub use config::{Ablations, ModelConfig};
pub use dst2former::{Dst2former, NODE_AXIS, TIME_AXIS};
pub use embedding::{Embedded, EmbeddingLayer};
pub use fusion::{ArMsa, ArMsaLayer, GraphFusion, ResidualMlp};
pub use head::PredictionHead;
pub use layers::{AttentionProbe, Ctx, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use params::{ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{GraphPair, NormStats, SampleBatch};
use crate::error::{Error, Result};
use crate::metrics::mae_loss;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Block layout of the network; holds parameter ids only.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub embedding: EmbeddingLayer,
    pub transformer: Option<Dst2former>,
    pub fusion: GraphFusion,
    pub ar_msa: ArMsa,
    pub head: PredictionHead,
}

#[derive(Clone, Debug)]
pub struct Dtrformer<F: Element = f32> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore<F>,
}

/// Result of one differentiable forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `(B, T', N, C_out)` in normalized units.
    pub normalized: Var,
    /// The same prediction in original units.
    pub prediction: Var,
    pub attention: Vec<AttentionProbe>,
}

impl<F: Element> Dtrformer<F> {
    /// Builds the architecture and draws initial parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedding = EmbeddingLayer::new(&mut params, &config, &mut rng);
        let transformer = if config.ablations.uses_transformer() {
            Some(Dst2former::new(&mut params, &config, &mut rng)?)
        } else {
            None
        };
        let fusion = GraphFusion::new(&mut params, &config, &mut rng);
        let ar_msa = ArMsa::new(&mut params, &config, &mut rng)?;
        let head = PredictionHead::new(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            arch: Architecture {
                embedding,
                transformer,
                fusion,
                ar_msa,
                head,
            },
            params,
        })
    }

    pub fn cast<G: Element>(&self) -> Dtrformer<G> {
        Dtrformer {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn check_inputs(&self, batch: &SampleBatch<F>, graphs: &GraphPair, stats: &NormStats) -> Result<()> {
        let c = &self.config;
        let s = batch.x.shape();
        if s.len() != 4 || s[1] != c.t_in || s[2] != c.nodes || s[3] != c.c_in {
            return Err(Error::shape(format!(
                "batch input {s:?} does not match (B, {}, {}, {})",
                c.t_in, c.nodes, c.c_in
            )));
        }
        if graphs.nodes() != c.nodes {
            return Err(Error::shape(format!(
                "graph has {} nodes, model expects {}",
                graphs.nodes(),
                c.nodes
            )));
        }
        if stats.channels() < c.c_out {
            return Err(Error::shape(format!(
                "normalization covers {} channels, model predicts {}",
                stats.channels(),
                c.c_out
            )));
        }
        if let Some(&i) = batch.tod.iter().find(|&&i| i >= c.n_d) {
            return Err(Error::IndexOutOfRange { index: i, len: c.n_d });
        }
        Ok(())
    }

    /// Normalized prediction from tape inputs `x` `(B, T, N, C)` and the graph pair.
    pub fn forward_normalized(
        &self,
        ctx: &Ctx<F>,
        x: Var,
        tod: &[usize],
        dow: &[usize],
        a_fwd: Var,
        a_bwd: Var,
    ) -> Result<Var> {
        let tape = ctx.tape;
        let s = tape.shape(x);
        let lead = [s[0], s[1], s[2]];
        let emb = self.arch.embedding.forward(ctx, x, tod, dow)?;
        let trend = match (&self.arch.transformer, emb.adaptive) {
            (Some(t), _) => {
                let h_st = t.forward(ctx, emb.x, emb.e_exp)?;
                Some(t.trend(ctx, h_st)?)
            }
            (None, adaptive) => adaptive,
        };
        let (gf, gb) = self.arch.fusion.project_graphs(ctx, a_fwd, a_bwd)?;
        let x_raw = self.arch.fusion.fuse(ctx, gf, gb, trend, lead)?;
        let z = self.arch.ar_msa.forward(ctx, emb.e_exp, x_raw)?;
        self.arch.head.forward(ctx, z)
    }

    /// `y·std + mean` per output channel.
    pub fn denormalize(&self, tape: &Tape<F>, y: Var, stats: &NormStats) -> Result<Var> {
        let c = self.config.c_out;
        let std = Tensor::from_fn(&[c], |i| F::of(stats.std[i]));
        let mean = Tensor::from_fn(&[c], |i| F::of(stats.mean[i]));
        let y = tape.mul(y, tape.constant(std))?;
        tape.add(y, tape.constant(mean))
    }

    pub fn forward(
        &self,
        ctx: &Ctx<F>,
        batch: &SampleBatch<F>,
        graphs: &GraphPair,
        stats: &NormStats,
    ) -> Result<Forward> {
        self.check_inputs(batch, graphs, stats)?;
        let tape = ctx.tape;
        let x = tape.constant(batch.x.clone());
        let a_fwd = tape.constant(graphs.a_fwd.cast());
        let a_bwd = tape.constant(graphs.a_bwd.cast());
        let normalized = self.forward_normalized(ctx, x, &batch.tod, &batch.dow, a_fwd, a_bwd)?;
        let prediction = self.denormalize(tape, normalized, stats)?;
        Ok(Forward {
            normalized,
            prediction,
            attention: ctx.take_probes(),
        })
    }

    /// Prediction in original units without recording gradients.
    pub fn predict(&self, batch: &SampleBatch<F>, graphs: &GraphPair, stats: &NormStats) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let ctx = Ctx::new(&tape, &vars);
        let out = self.forward(&ctx, batch, graphs, stats)?;
        let pred = tape.value(out.prediction).clone();
        Ok(pred)
    }

    /// MAE loss in original units and its gradient for every parameter.
    ///
    /// `dropout_seed` enables dropout (if configured) with masks drawn from it.
    /// A non-finite gradient fails with the name of the parameter it belongs to.
    pub fn loss_and_grads(
        &self,
        batch: &SampleBatch<F>,
        graphs: &GraphPair,
        stats: &NormStats,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Tensor<F>>)> {
        let tape = Tape::new().with_finite_checks(false);
        let vars = self.params.bind(&tape);
        let mut ctx = Ctx::new(&tape, &vars);
        if let Some(seed) = dropout_seed {
            ctx = ctx.with_dropout(self.config.dropout, ChaCha8Rng::seed_from_u64(seed));
        }
        let out = self.forward(&ctx, batch, graphs, stats)?;
        let y = tape.constant(batch.y.clone());
        let loss = mae_loss(&tape, out.prediction, y)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        drop(ctx);
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<F>> = vars
            .iter()
            .zip(self.params.values())
            .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
            .collect();
        if let Some((id, _)) = self.params.ids().zip(&grads).find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFiniteParameterGradient(self.params.name(id).to_string()));
        }
        Ok((value, grads))
    }
}
