//! Central-difference check of every parameter tensor's analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{ModelDims, OwnedSeqInput, Params};
use crate::error::Result;
use crate::linalg::Real;
use crate::losses::{NalLossType, NalTarget};
use crate::model::{context_features, example_loss_grad, ExampleInput, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_abs_err: f64,
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub rel_err: f64,
    pub grad_norm_inf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Precision of the analytic (backward-pass) gradients.
    pub precision: &'static str,
    /// Central-difference step of the f64 oracle.
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

struct Case<T> {
    input: ExampleInput<T>,
    targets: Vec<NalTarget>,
}

fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / norm).collect()
}

fn cast_case<S: Real, T: Real>(c: &Case<S>) -> Case<T> {
    let f = |x: S| T::of(x.to_f64().expect("finite"));
    let seq = &c.input.seq;
    Case {
        input: ExampleInput {
            seq: OwnedSeqInput {
                tokens: seq.tokens.iter().map(|&x| f(x)).collect(),
                actions: seq.actions.clone(),
                surfaces: seq.surfaces.clone(),
                valid: seq.valid.clone(),
            },
            cand: c.input.cand.iter().map(|&x| f(x)).collect(),
            ctx: c.input.ctx.map(f),
            labels: c.input.labels,
        },
        targets: c.targets.clone(),
    }
}

fn random_cases<T: Real>(dims: &ModelDims, seed: u64, n: usize) -> Vec<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (len, emb) = (dims.seq_len, dims.emb);
    (0..n)
        .map(|_| {
            let mut seq = OwnedSeqInput::<T>::padding(len, emb);
            for i in 0..len {
                seq.valid[i] = i == 0 || rng.random_bool(0.8);
                if seq.valid[i] {
                    seq.actions[i] = rng.random_range(1..32);
                    seq.surfaces[i] = rng.random_range(0..4);
                    for (o, v) in seq.tokens[i * emb..(i + 1) * emb].iter_mut().zip(unit(&mut rng, emb)) {
                        *o = T::of(v);
                    }
                }
            }
            let valid: Vec<usize> = (0..len).filter(|&i| seq.valid[i]).collect();
            let targets = valid
                .iter()
                .take(3)
                .map(|&slot| NalTarget {
                    slot,
                    positive: unit(&mut rng, emb),
                    negatives: (0..3).map(|_| unit(&mut rng, emb)).collect(),
                })
                .collect();
            Case {
                input: ExampleInput {
                    seq,
                    cand: unit(&mut rng, emb).into_iter().map(T::of).collect(),
                    ctx: context_features(rng.random_range(1..2_000_000_000)).map(T::of),
                    labels: [(); 4].map(|_| rng.random_bool(0.5)),
                },
                targets,
            }
        })
        .collect()
}

fn loss<T: Real>(p: &Params<T>, cases: &[Case<T>], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for c in cases {
        let l = example_loss_grad(p, true, &c.input, &c.targets, w, None)?;
        total += w.ce_scale * l.ce + w.nal_scale * l.nal;
    }
    Ok(total)
}

/// Checks the tiny model's backward pass in precision `T` against central
/// differences of the loss.
///
/// The numeric side always runs in f64 on the same (T-rounded) parameters
/// and inputs: f32 forward passes carry ~1e-7 relative round-off, which
/// through a 1e-3 step is ~1e-4 of absolute noise per entry, enough to
/// swamp a 1e-3 relative tolerance on its own.
pub fn grad_check<T: Real>(seed: u64) -> Result<GradCheckReport> {
    grad_check_with::<T>(ModelDims::tiny(), seed, None)
}

/// As [`grad_check`]; `corrupt` names a tensor whose analytic gradient is
/// deliberately perturbed before comparison (negative control).
pub fn grad_check_with<T: Real>(dims: ModelDims, seed: u64, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let f32_like = std::mem::size_of::<T>() == 4;
    let h = 1e-5;
    let mut p = Params::<T>::init(dims, seed)?;
    // Move layer norms and biases off their trivial init so every term is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for x in p.data.iter_mut() {
        *x += T::of(rng.random_range(-0.1..0.1));
    }
    let cases64 = random_cases::<f64>(&dims, seed, 3);
    let cases: Vec<Case<T>> = cases64.iter().map(cast_case).collect();
    // Oracle inputs: exactly the values the T model sees.
    let cases64: Vec<Case<f64>> = cases.iter().map(cast_case).collect();
    let mut p64 = p.cast::<f64>();
    let w = LossWeights {
        head: [1.0, 0.5, 2.0, 1.5],
        ce_scale: 1.0 / cases.len() as f64,
        nal_scale: 0.3,
        nal_kind: NalLossType::SampledSoftmax,
    };
    let mut grads = vec![T::zero(); p.data.len()];
    for c in &cases {
        example_loss_grad(&p, true, &c.input, &c.targets, &w, Some(&mut grads))?;
    }
    if let Some(name) = corrupt {
        if let Some(spec) = p.layout.tensor(name) {
            for g in &mut grads[spec.range.clone()] {
                *g = *g * T::of(1.05) + T::of(1e-3);
            }
        }
    }

    let mut tensors = Vec::new();
    for spec in p.layout.tensors.clone() {
        let (mut max_abs, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in spec.range.clone() {
            let orig = p64.data[i];
            p64.data[i] = orig + h;
            let up = loss(&p64, &cases64, &w)?;
            p64.data[i] = orig - h;
            let down = loss(&p64, &cases64, &w)?;
            p64.data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[i].to_f64().unwrap_or(f64::NAN);
            max_abs = max_abs.max((analytic - numeric).abs());
            na = na.max(analytic.abs());
            nn = nn.max(numeric.abs());
        }
        let scale = na.max(nn);
        tensors.push(TensorCheck {
            name: spec.name.clone(),
            max_abs_err: max_abs,
            rel_err: if scale > 0.0 { max_abs / scale } else { 0.0 },
            grad_norm_inf: na,
        });
    }
    Ok(GradCheckReport {
        precision: if f32_like { "f32" } else { "f64" },
        step: h,
        tensors,
    })
}
