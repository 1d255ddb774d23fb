//! Building blocks shared by the encoders, the fusion module and the head.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Attention record captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionProbe {
    pub name: String,
    pub var: Var,
}

/// Parameters bound to a tape plus per-pass state.
pub struct Ctx<'a, F: Element> {
    pub tape: &'a Tape<F>,
    vars: &'a [Var],
    dropout: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
    probes: RefCell<Vec<AttentionProbe>>,
}

impl<'a, F: Element> Ctx<'a, F> {
    pub fn new(tape: &'a Tape<F>, vars: &'a [Var]) -> Self {
        Self {
            tape,
            vars,
            dropout: 0.0,
            rng: None,
            probes: RefCell::new(Vec::new()),
        }
    }

    /// Enables dropout with rate `p`, drawing masks from `rng`.
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = p;
        self.rng = Some(RefCell::new(rng));
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn dropout(&self, x: Var) -> Result<Var> {
        match &self.rng {
            Some(rng) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, &mut *rng.borrow_mut()),
            _ => Ok(x),
        }
    }

    pub fn record_attention(&self, name: impl Into<String>, var: Var) {
        self.probes.borrow_mut().push(AttentionProbe { name: name.into(), var });
    }

    pub fn take_probes(&self) -> Vec<AttentionProbe> {
        std::mem::take(&mut *self.probes.borrow_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[din, dout], din, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[dout], din, rng));
        Self { w, b, din, dout }
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, x: Var) -> Result<Var> {
        ctx.tape.linear(x, ctx.p(self.w), self.b.map(|b| ctx.p(b)), false)
    }

    pub fn forward_relu<F: Element>(&self, ctx: &Ctx<F>, x: Var) -> Result<Var> {
        ctx.tape.linear(x, ctx.p(self.w), self.b.map(|b| ctx.p(b)), true)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.g"), &[width], 1.0),
            bias: store.add_const(format!("{name}.b"), &[width], 0.0),
        }
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, x: Var) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias))
    }

    /// `LN(x + r)`.
    pub fn residual<F: Element>(&self, ctx: &Ctx<F>, x: Var, r: Var) -> Result<Var> {
        ctx.tape.add_layer_norm(x, r, ctx.p(self.gain), ctx.p(self.bias))
    }
}

/// `width → mult·width → width` with ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, mult * width, true, rng),
            down: Linear::new(store, &format!("{name}.down"), mult * width, width, true, rng),
        }
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, x: Var) -> Result<Var> {
        let h = self.up.forward_relu(ctx, x)?;
        self.down.forward(ctx, h)
    }
}

/// Bias-free query/key/value/output projections around [`Tape::attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Queries read `dq` features, keys and values read `dkv`; the attention
    /// width is `dq` and the output width is `dout`.
    pub fn new<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dq: usize,
        dkv: usize,
        dout: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dq.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {dq} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dq, dq, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dkv, dq, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dkv, dq, false, rng),
            o: Linear::new(store, &format!("{name}.o"), dq, dout, false, rng),
            heads,
        })
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, xq: Var, xkv: Var, seq_axis: usize, name: &str) -> Result<Var> {
        let q = self.q.forward(ctx, xq)?;
        let k = self.k.forward(ctx, xkv)?;
        let v = self.v.forward(ctx, xkv)?;
        let a = ctx.tape.attention(q, k, v, self.heads, seq_axis)?;
        ctx.record_attention(name, a);
        self.o.forward(ctx, a)
    }
}

/// Self-attention along one axis followed by a feed-forward block, each
/// wrapped in residual + layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, width, width, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ffn_mult, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
        })
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, x: Var, seq_axis: usize, name: &str) -> Result<Var> {
        let a = self.attn.forward(ctx, x, x, seq_axis, name)?;
        let a = ctx.dropout(a)?;
        let h = self.ln1.residual(ctx, x, a)?;
        let f = self.ffn.forward(ctx, h)?;
        let f = ctx.dropout(f)?;
        self.ln2.residual(ctx, h, f)
    }
}
