use rand::Rng;

use super::config::ModelConfig;
use super::dst2former::NODE_AXIS;
use super::layers::{Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Residual MLP layer `x + FC2(relu(FC1(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Static graph views fused with the dynamic trend.
#[derive(Clone, Debug)]
pub struct GraphFusion {
    pub g_fwd: Option<Linear>,
    pub g_bwd: Option<Linear>,
    pub mlp: Vec<ResidualMlp>,
    pub reduce: Linear,
    pub uses_trend: bool,
}

impl GraphFusion {
    pub fn new<F: Element, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let a = cfg.ablations;
        let n = cfg.nodes;
        let g_fwd = a
            .uses_forward_graph()
            .then(|| Linear::new(store, "graph.fwd", n, cfg.d_n, true, rng));
        let g_bwd = a
            .uses_backward_graph()
            .then(|| Linear::new(store, "graph.bwd", n, cfg.d_n, true, rng));
        let w = cfg.fusion_width();
        let mlp = (0..cfg.fusion_layers)
            .map(|l| ResidualMlp {
                fc1: Linear::new(store, &format!("fusion.{l}.fc1"), w, w, true, rng),
                fc2: Linear::new(store, &format!("fusion.{l}.fc2"), w, w, true, rng),
            })
            .collect();
        Self {
            g_fwd,
            g_bwd,
            mlp,
            reduce: Linear::new(store, "fusion.reduce", w, cfg.d_a, true, rng),
            uses_trend: !a.no_adaptive,
        }
    }

    /// `relu(A·W + b)` for each enabled direction; `a_fwd`/`a_bwd` are `(N, N)`.
    pub fn project_graphs<F: Element>(
        &self,
        ctx: &Ctx<F>,
        a_fwd: Var,
        a_bwd: Var,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let gf = self.g_fwd.as_ref().map(|l| l.forward_relu(ctx, a_fwd)).transpose()?;
        let gb = self.g_bwd.as_ref().map(|l| l.forward_relu(ctx, a_bwd)).transpose()?;
        Ok((gf, gb))
    }

    /// `concat(G_f, G_b, trend)` through the residual MLP and the reduction to `d_a`.
    ///
    /// `lead` is `(B, T, N)`; graph views broadcast over batch and time.
    pub fn fuse<F: Element>(
        &self,
        ctx: &Ctx<F>,
        g_fwd: Option<Var>,
        g_bwd: Option<Var>,
        trend: Option<Var>,
        lead: [usize; 3],
    ) -> Result<Var> {
        let tape = ctx.tape;
        let mut parts = Vec::with_capacity(3);
        for g in [g_fwd, g_bwd].into_iter().flatten() {
            let d = tape.shape(g)[1];
            parts.push(tape.broadcast_to(g, &[lead[0], lead[1], lead[2], d])?);
        }
        if let Some(t) = trend {
            parts.push(t);
        }
        if parts.is_empty() {
            return Err(Error::Config("graph fusion has no inputs".into()));
        }
        let mut h = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 3)?
        };
        let width = tape.shape(h)[3];
        if width != self.reduce.din {
            return Err(Error::shape(format!(
                "fusion input width {width}, expected {}",
                self.reduce.din
            )));
        }
        for layer in &self.mlp {
            let inner = layer.fc1.forward_relu(ctx, h)?;
            let out = layer.fc2.forward(ctx, inner)?;
            h = tape.add(h, out)?;
        }
        self.reduce.forward(ctx, h)
    }
}

/// One augmented-residual self-attention layer over nodes.
#[derive(Clone, Debug)]
pub struct ArMsaLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ArMsa {
    pub layers: Vec<ArMsaLayer>,
    pub augmented: bool,
}

impl ArMsa {
    pub fn new<F: Element, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model();
        let layers = (0..cfg.armsa_layers)
            .map(|l| {
                Ok(ArMsaLayer {
                    attn: MultiHeadAttention::new(store, &format!("armsa.{l}.attn"), d, d, d, cfg.heads, rng)?,
                    ln1: LayerNorm::new(store, &format!("armsa.{l}.ln1"), d),
                    ffn: FeedForward::new(store, &format!("armsa.{l}.ffn"), d, cfg.ffn_mult, rng),
                    ln2: LayerNorm::new(store, &format!("armsa.{l}.ln2"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            augmented: !cfg.ablations.no_augmented_residual,
        })
    }

    /// `Z = concat(E_exp, X_raw)`, then per layer
    /// `Z ← LN(Z + gelu(Z) + MHSA(Z))` and `Z ← LN(Z + FFN(Z))`.
    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, e_exp: Var, x_raw: Var) -> Result<Var> {
        let tape = ctx.tape;
        let mut z = tape.concat(&[e_exp, x_raw], 3)?;
        let width = tape.shape(z)[3];
        if let Some(first) = self.layers.first() {
            if width != first.attn.q.din {
                return Err(Error::shape(format!(
                    "graph-fusion attention width {width}, expected {}",
                    first.attn.q.din
                )));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.attn.forward(ctx, z, z, NODE_AXIS, &format!("armsa.{l}"))?;
            let h = ctx.dropout(h)?;
            let h = if self.augmented { tape.add(h, tape.gelu(z))? } else { h };
            let z1 = layer.ln1.residual(ctx, z, h)?;
            let f = layer.ffn.forward(ctx, z1)?;
            let f = ctx.dropout(f)?;
            z = layer.ln2.residual(ctx, z1, f)?;
        }
        Ok(z)
    }
}
