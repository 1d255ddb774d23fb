use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Ctx, Linear};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Feature projections, calendar tables and the adaptive node matrix.
#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    pub w_time: Linear,
    pub w_space: Linear,
    pub dict_w: ParamId,
    pub dict_d: ParamId,
    pub adaptive: Option<ParamId>,
}

/// Output of [`EmbeddingLayer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    /// `concat(E_ft, E_fs, T_w, T_d)`, `(B, T, N, d_e)`.
    pub e_exp: Var,
    /// Adaptive matrix broadcast to `(B, T, N, d_a)`.
    pub adaptive: Option<Var>,
    /// The full embedding `X`.
    pub x: Var,
}

impl EmbeddingLayer {
    pub fn new<F: Element, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d_f = cfg.d_f;
        Self {
            w_time: Linear::new(store, "embed.time", cfg.c_in, d_f, true, rng),
            w_space: Linear::new(store, "embed.space", cfg.c_in, d_f, true, rng),
            dict_w: store.add_uniform("embed.dow", &[7, d_f], 7, rng),
            dict_d: store.add_uniform("embed.tod", &[cfg.n_d, d_f], cfg.n_d, rng),
            adaptive: (!cfg.ablations.no_adaptive)
                .then(|| store.add_normal("embed.adaptive", &[cfg.nodes, cfg.d_a], 0.01, rng)),
        }
    }

    /// `x` is `(B, T, N, C)`; `tod`/`dow` are row-major `(B, T)`.
    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, x: Var, tod: &[usize], dow: &[usize]) -> Result<Embedded> {
        let tape = ctx.tape;
        let shape = tape.shape(x);
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "embedding input must be (B, T, N, C), got {shape:?}"
            )));
        }
        let (b, t, n) = (shape[0], shape[1], shape[2]);
        if tod.len() != b * t || dow.len() != b * t {
            return Err(Error::shape(format!(
                "calendar indices for {} steps, batch has {}",
                tod.len().min(dow.len()),
                b * t
            )));
        }
        let e_ft = self.w_time.forward(ctx, x)?;
        let e_fs = self.w_space.forward(ctx, x)?;
        let d_f = tape.shape(e_ft)[3];
        let calendar = |table: ParamId, idx: &[usize]| -> Result<Var> {
            let e = tape.embedding(ctx.p(table), idx, &[b, t])?;
            let e = tape.reshape(e, &[b, t, 1, d_f])?;
            tape.broadcast_to(e, &[b, t, n, d_f])
        };
        let t_w = calendar(self.dict_w, dow)?;
        let t_d = calendar(self.dict_d, tod)?;
        let e_exp = tape.concat(&[e_ft, e_fs, t_w, t_d], 3)?;
        let adaptive = match self.adaptive {
            Some(id) => {
                let a = ctx.p(id);
                let a_shape = tape.shape(a);
                if a_shape[0] != n {
                    return Err(Error::shape(format!(
                        "adaptive embedding has {} nodes, batch has {n}",
                        a_shape[0]
                    )));
                }
                Some(tape.broadcast_to(a, &[b, t, n, a_shape[1]])?)
            }
            None => None,
        };
        let x = match adaptive {
            Some(a) => tape.concat(&[e_exp, a], 3)?,
            None => e_exp,
        };
        Ok(Embedded { e_exp, adaptive, x })
    }
}
