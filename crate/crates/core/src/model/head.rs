use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Ctx, Linear};
use super::params::ParamStore;
use crate::error::Result;
use crate::tensor::{Element, Var};

/// Per-node affine map from the flattened `(T, D)` window to `(T', C_out)`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub proj: Linear,
    pub t_out: usize,
    pub c_out: usize,
}

impl PredictionHead {
    pub fn new<F: Element, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(
                store,
                "head",
                cfg.t_in * cfg.d_model(),
                cfg.t_out * cfg.c_out,
                true,
                rng,
            ),
            t_out: cfg.t_out,
            c_out: cfg.c_out,
        }
    }

    /// `(B, T, N, D)` → `(B, T', N, C_out)`, in normalized units.
    pub fn forward<F: Element>(&self, ctx: &Ctx<F>, z: Var) -> Result<Var> {
        let tape = ctx.tape;
        let s = tape.shape(z);
        let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
        let z = tape.permute(z, &[0, 2, 1, 3])?;
        let z = tape.reshape(z, &[b, n, t * d])?;
        let y = self.proj.forward(ctx, z)?;
        let y = tape.reshape(y, &[b, n, self.t_out, self.c_out])?;
        tape.permute(y, &[0, 2, 1, 3])
    }
}
