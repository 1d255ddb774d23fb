use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Ctx, EncoderLayer, FeedForward, LayerNorm, MultiHeadAttention};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Axis of nodes in `(B, T, N, D)`.
pub const NODE_AXIS: usize = 2;
/// Axis of time steps in `(B, T, N, D)`.
pub const TIME_AXIS: usize = 1;

/// Parallel spatial/temporal encoder stacks joined by cross attention.
#[derive(Clone, Debug)]
pub struct Dst2former {
    pub spatial: Vec<EncoderLayer>,
    pub temporal: Vec<EncoderLayer>,
    pub cross: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
    pub d_e: usize,
}

impl Dst2former {
    pub fn new<F: Element, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model();
        let mut spatial = Vec::with_capacity(cfg.layers);
        let mut temporal = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            spatial.push(EncoderLayer::new(
                store,
                &format!("spatial.{l}"),
                d,
                cfg.heads,
                cfg.ffn_mult,
                rng,
            )?);
        }
        for l in 0..cfg.layers {
            temporal.push(EncoderLayer::new(
                store,
                &format!("temporal.{l}"),
                d,
                cfg.heads,
                cfg.ffn_mult,
                rng,
            )?);
        }
        Ok(Self {
            spatial,
            temporal,
            cross: MultiHeadAttention::new(store, "cross.attn", d, d, cfg.d_a, cfg.heads, rng)?,
            ln1: LayerNorm::new(store, "cross.ln1", d),
            ffn: FeedForward::new(store, "cross.ffn", d, cfg.ffn_mult, rng),
            ln2: LayerNorm::new(store, "cross.ln2", d),
            d_e: cfg.d_e(),
        })
    }

    /// Self-attention over nodes per `(batch, step)`.
    pub fn spatial_encoder<F: Element>(&self, ctx: &Ctx<F>, x: Var) -> Result<Var> {
        self.spatial.iter().enumerate().try_fold(x, |h, (l, layer)| {
            layer.forward(ctx, h, NODE_AXIS, &format!("spatial.{l}"))
        })
    }

    /// Self-attention over time steps per `(batch, node)`.
    pub fn temporal_encoder<F: Element>(&self, ctx: &Ctx<F>, x: Var) -> Result<Var> {
        self.temporal.iter().enumerate().try_fold(x, |h, (l, layer)| {
            layer.forward(ctx, h, TIME_AXIS, &format!("temporal.{l}"))
        })
    }

    /// Spatial queries against temporal keys/values along time, per node.
    ///
    /// Returns `H_st = LN(h + FFN(h))` with `h = LN(concat(E_exp, X_trd) + H_t)`.
    pub fn cross_attention<F: Element>(&self, ctx: &Ctx<F>, h_s: Var, h_t: Var, e_exp: Var) -> Result<Var> {
        let tape = ctx.tape;
        if tape.shape(h_s) != tape.shape(h_t) {
            return Err(Error::shape(format!(
                "cross attention between {:?} and {:?}",
                tape.shape(h_s),
                tape.shape(h_t)
            )));
        }
        let trend = self.cross.forward(ctx, h_s, h_t, TIME_AXIS, "cross")?;
        let joined = tape.concat(&[e_exp, trend], 3)?;
        let h = self.ln1.residual(ctx, joined, h_t)?;
        let f = self.ffn.forward(ctx, h)?;
        let f = ctx.dropout(f)?;
        self.ln2.residual(ctx, h, f)
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, x: Var, e_exp: Var) -> Result<Var> {
        let h_s = self.spatial_encoder(ctx, x)?;
        let h_t = self.temporal_encoder(ctx, x)?;
        self.cross_attention(ctx, h_s, h_t, e_exp)
    }

    /// The `d_a`-wide trend slice of `H_st` that feeds graph fusion.
    pub fn trend<F: Element>(&self, ctx: &Ctx<F>, h_st: Var) -> Result<Var> {
        let d = ctx.tape.shape(h_st)[3];
        ctx.tape.narrow(h_st, 3, self.d_e, d - self.d_e)
    }
}
