use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Element, Tensor};

/// Adam with bias correction; no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<F: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Element> Adam<F> {
    /// Zero moments shaped like every parameter in `params`.
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<F>] {
        &self.v
    }

    /// One update. Fails before touching anything if a gradient is
    /// non-finite, naming the parameter.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters ({} moment slots)",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for `{}` of shape {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteParameterGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (a1, a2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let (c1, c2, lr, eps) = (F::of(c1), F::of(c2), F::of(self.lr), F::of(self.eps));
        let slots = params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in slots {
            let lanes = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in lanes {
                *m = b1f * *m + a1 * g;
                *v = b2f * *v + a2 * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
///
/// Returns the norm before clipping. `max_norm <= 0` leaves them alone.
pub fn clip_global_norm<F: Element>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}
