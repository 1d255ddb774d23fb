//! Central finite-difference verification of tape gradients (64-bit).

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    /// `(input, flat index)` of the worst component.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<Fun>(f: &Fun, inputs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Checks the gradient of a scalar function of several inputs.
///
/// `coords` restricts the comparison to `(input, flat index)` pairs; `None`
/// checks every component of every input.
pub fn grad_check_many<Fun>(
    f: Fun,
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    eps: f64,
) -> Result<GradCheckReport>
where
    Fun: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_floored(f, inputs, coords, eps, DEFAULT_FLOOR)
}

pub const DEFAULT_FLOOR: f64 = 1e-8;

/// [`grad_check_many`] with an explicit denominator floor. Components whose
/// gradients are below `floor` are compared in absolute terms, scaled by
/// `1 / floor`; use it when the loss is large enough that central
/// differences cannot resolve small entries.
pub fn grad_check_floored<Fun>(
    f: Fun,
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    Fun: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let plus = evaluate(&f, &probe)?;
        probe[i].data_mut()[j] = orig - eps;
        let minus = evaluate(&f, &probe)?;
        probe[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_relative_error || report.checked == 1 {
            report.max_relative_error = rel;
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Worst relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), None, eps)?;
    Ok(report.max_relative_error)
}

/// One entry of [`op_suite`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub case: &'static str,
    /// Kind of the op whose output was checked.
    pub kind: OpKind,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in [0.1, 1) keep kinks at zero out of reach of the step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>,
);

fn cases() -> Vec<Case> {
    let r = random;
    let z = away_from_zero;
    vec![
        (
            "add",
            vec![r(&[2, 3, 4], 1), r(&[3, 4], 2)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "add-mid",
            vec![r(&[2, 1, 4], 3), r(&[3, 1], 4)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![r(&[3, 2], 5), r(&[2], 6)],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![r(&[2, 3, 2], 7), r(&[2, 1, 2], 8)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        ("scale", vec![r(&[4, 3], 9)], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        (
            "matmul",
            vec![r(&[2, 3, 4], 10), r(&[4, 2], 11)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "matmul-broadcast",
            vec![r(&[2, 1, 3, 4], 12), r(&[3, 4, 2], 13)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "linear",
            vec![r(&[2, 3, 4], 14), r(&[4, 3], 15), r(&[3], 16)],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]), false)),
        ),
        // single-term pre-activations, so |x|, |w| ≥ 0.1 keeps them off the kink
        (
            "linear-relu",
            vec![z(&[3, 1], 17), z(&[1, 4], 18)],
            Box::new(|t, v| t.linear(v[0], v[1], None, true)),
        ),
        (
            "permute",
            vec![r(&[2, 3, 4], 19)],
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
        ),
        (
            "reshape",
            vec![r(&[2, 3, 4], 20)],
            Box::new(|t, v| t.reshape(v[0], &[4, 6])),
        ),
        (
            "broadcast_to",
            vec![r(&[3, 1, 2], 21)],
            Box::new(|t, v| t.broadcast_to(v[0], &[2, 3, 4, 2])),
        ),
        (
            "concat",
            vec![r(&[2, 3, 1], 22), r(&[2, 1, 1], 23)],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        (
            "narrow",
            vec![r(&[3, 4, 2], 24)],
            Box::new(|t, v| t.narrow(v[0], 1, 1, 2)),
        ),
        (
            "split",
            vec![r(&[3, 4], 25)],
            Box::new(|t, v| {
                let parts = t.split(v[0], 1, &[1, 3])?;
                let a = t.scale(parts[0], 3.0);
                let b = t.sum(parts[1]);
                t.add(a, b)
            }),
        ),
        (
            "softmax-last",
            vec![r(&[3, 4], 26)],
            Box::new(|t, v| t.softmax(v[0], 1)),
        ),
        (
            "softmax-mid",
            vec![r(&[2, 3, 4], 27)],
            Box::new(|t, v| t.softmax(v[0], 1)),
        ),
        (
            "layer_norm",
            vec![r(&[3, 4], 28), r(&[4], 29), r(&[4], 30)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "add_layer_norm",
            vec![r(&[2, 3, 4], 45), r(&[2, 3, 4], 46), r(&[4], 47), r(&[4], 48)],
            Box::new(|t, v| t.add_layer_norm(v[0], v[1], v[2], v[3])),
        ),
        (
            "add_layer_norm-same",
            vec![r(&[3, 5], 49), r(&[5], 50), r(&[5], 51)],
            Box::new(|t, v| t.add_layer_norm(v[0], v[0], v[1], v[2])),
        ),
        ("relu", vec![z(&[3, 4], 31)], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("gelu", vec![r(&[3, 4], 32)], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("abs", vec![z(&[3, 4], 33)], Box::new(|t, v| Ok(t.abs(v[0])))),
        (
            "embedding",
            vec![r(&[5, 3], 34)],
            Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2], &[2, 2])),
        ),
        ("sum", vec![r(&[3, 2], 35)], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![r(&[3, 2], 36)], Box::new(|t, v| Ok(t.mean(v[0])))),
        (
            "attention",
            vec![r(&[2, 3, 4, 4], 37), r(&[2, 3, 4, 4], 38), r(&[2, 3, 4, 2], 39)],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], 2, 1)),
        ),
        (
            "attention-node-axis",
            vec![r(&[2, 3, 4, 4], 40), r(&[2, 3, 2, 4], 41), r(&[2, 3, 2, 4], 42)],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], 2, 2)),
        ),
        (
            "attention-self",
            vec![r(&[3, 4], 43)],
            Box::new(|t, v| t.attention(v[0], v[0], v[0], 1, 0)),
        ),
        (
            "dropout",
            vec![r(&[4, 4], 44)],
            Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                t.dropout(v[0], 0.3, &mut rng)
            }),
        ),
    ]
}

/// Checks every differentiable op on small fixed-seed inputs. Each output
/// is reduced through `Σ y ⊙ R` for a fixed random `R`, so every component
/// contributes.
pub fn op_suite(eps: f64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (case, inputs, f) in cases() {
        let kind = Cell::new(OpKind::Leaf);
        let report = grad_check_many(
            |t, v| {
                let y = f(t, v)?;
                kind.set(t.op_kind(y));
                let r = t.constant(random(&t.shape(y), 0xabcdef ^ 7));
                let prod = t.mul(y, r)?;
                Ok(t.sum(prod))
            },
            &inputs,
            None,
            eps,
        )?;
        out.push(OpCheck {
            case,
            kind: kind.get(),
            report,
        });
    }
    Ok(out)
}
