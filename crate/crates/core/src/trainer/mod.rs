//! Toy-scale training: mini-batch loop, SGD/Adam, per-step metrics.

mod ablation;
mod gradcheck;

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingExample;
use crate::encoder::{ModelDims, Params};
use crate::error::{Error, Result};
use crate::losses::{select_samples, HeadConfig, NalConfig, NalSource, NalTarget};
use crate::model::{assembled_for, example_input, example_loss_grad, ExampleLoss, LossWeights, RankingModel};
use crate::nnsearch::{AssembledSequence, NnConfig};
use crate::par::{self, Parallelism};
use crate::seqcore::UserSequences;

pub use ablation::{run_ablation, AblationCell, AblationGrid, AblationTable};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, TensorCheck};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// `None` removes the next-action loss from the step entirely (no sample
    /// selection, no projection gradient).
    pub nal: Option<NalConfig>,
    pub nn: NnConfig,
    pub head: HeadConfig,
    /// False trains the no-sequence baseline.
    pub use_sequence: bool,
    pub parallelism: Parallelism,
}

/// Compact sequence layout used for desk-scale training (32 slots).
pub fn toy_nn() -> NnConfig {
    NnConfig {
        r: 8,
        k_ll: 16,
        k_rt: 4,
        k_imp: 4,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 200,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
            nal: Some(NalConfig::default()),
            nn: toy_nn(),
            head: HeadConfig::default(),
            use_sequence: true,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("lr must be finite and >= 0"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::validation("steps and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::validation("adam needs beta in [0, 1) and eps > 0"));
        }
        if let Some(nal) = &self.nal {
            nal.validate()?;
        }
        self.head.validate()?;
        self.nn.validate()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::standard(self.nn.seq_len())
    }

    /// NAL settings that actually apply (none for the baseline).
    fn active_nal(&self) -> Option<&NalConfig> {
        self.nal.as_ref().filter(|_| self.use_sequence)
    }
}

/// Training examples plus the sequences needed to assemble their inputs.
pub struct TrainData<'a> {
    pub examples: &'a [TrainingExample],
    pub users: HashMap<u64, &'a UserSequences>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub nal: f64,
    pub total: f64,
    pub positives: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NalCounters {
    pub fallback_warnings: usize,
    pub impression_fallbacks: usize,
    pub skipped: usize,
}

pub struct TrainOutput {
    pub model: RankingModel,
    pub log: Vec<StepMetrics>,
    pub nal: NalCounters,
}

pub fn write_metrics(path: impl AsRef<Path>, log: &[StepMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in log {
        serde_json::to_writer(&mut f, m).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// First-order optimizer state.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, n: usize) -> Self {
        let adam = cfg.optimizer == OptimizerKind::Adam;
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.eps as f32,
            t: 0,
            m: if adam { vec![0.0; n] } else { Vec::new() },
            v: if adam { vec![0.0; n] } else { Vec::new() },
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

// Examples per gradient work unit; fixed so reductions don't depend on threads.
const GRAD_CHUNK: usize = 4;
const NAL_STREAM: u64 = 0x6e61_6c5f_7365_6c73;

/// Loss and gradient of one batch. Returns `(ce, nal, total, positives)`.
fn batch_gradient(
    params: &Params<f32>,
    cfg: &TrainConfig,
    batch: &[&TrainingExample],
    seqs: &[Cow<'_, AssembledSequence>],
    targets: &[Vec<NalTarget>],
    positives: usize,
    grads: &mut [f32],
) -> Result<(f64, f64, f64)> {
    let nal = cfg.active_nal();
    let w_nal = nal.map_or(0.0, |n| n.w_nal);
    let weights = LossWeights {
        head: cfg.head.ce_weights,
        ce_scale: 1.0 / batch.len() as f64,
        nal_scale: if positives > 0 { w_nal / positives as f64 } else { 0.0 },
        nal_kind: nal.map(|n| n.loss).unwrap_or_default(),
    };
    let n = params.data.len();
    let parts = par::map_chunks(batch.len(), GRAD_CHUNK, cfg.parallelism, |r| -> Result<(Vec<f32>, Vec<ExampleLoss>)> {
        let mut g = vec![0.0f32; n];
        let mut losses = Vec::with_capacity(r.len());
        for i in r {
            let input = example_input::<f32>(batch[i], &seqs[i]);
            let t = targets.get(i).map_or(&[][..], |t| &t[..]);
            losses.push(example_loss_grad(params, cfg.use_sequence, &input, t, &weights, Some(&mut g))?);
        }
        Ok((g, losses))
    });
    grads.fill(0.0);
    let (mut ce, mut nal_sum) = (0.0, 0.0);
    for part in parts {
        let (g, losses) = part?;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
        for l in losses {
            ce += l.ce;
            nal_sum += l.nal;
        }
    }
    let ce = ce / batch.len() as f64;
    let total;
    let nal_mean;
    if nal.is_some() {
        nal_mean = if positives > 0 { nal_sum / positives as f64 } else { 0.0 };
        total = ce + w_nal * nal_mean;
    } else {
        nal_mean = 0.0;
        total = ce;
    }
    Ok((ce, nal_mean, total))
}

pub fn train(data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.examples.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let mut model = RankingModel::new(cfg.dims(), cfg.nn, cfg.use_sequence, cfg.seed)?;
    let mut opt = Optimizer::new(cfg, model.params.data.len());
    let mut grads = vec![0.0f32; model.params.data.len()];
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nal_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NAL_STREAM);
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut counters = NalCounters::default();

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            batch.push(&data.examples[order[cursor]]);
            cursor += 1;
        }
        let seqs = batch
            .iter()
            .map(|ex| assembled_for(ex, data.users.get(&ex.user_id).copied(), &cfg.nn))
            .collect::<Result<Vec<_>>>()?;

        let (targets, positives) = match cfg.active_nal() {
            Some(nal) => {
                let empty = UserSequences::default();
                let sources: Vec<NalSource<'_>> = batch
                    .iter()
                    .zip(&seqs)
                    .map(|(ex, seq)| {
                        let user = data.users.get(&ex.user_id).copied().unwrap_or(&empty);
                        NalSource {
                            user_id: ex.user_id,
                            assembled: seq,
                            realtime: &user.realtime,
                            impression: &user.impression,
                        }
                    })
                    .collect();
                let sel = select_samples(&sources, nal, &mut nal_rng);
                counters.fallback_warnings += sel.fallback_warnings;
                counters.impression_fallbacks += sel.impression_fallbacks;
                counters.skipped += sel.skipped;
                (sel.targets, sel.positives)
            }
            None => (Vec::new(), 0),
        };

        let (ce, nal, total) = batch_gradient(&model.params, cfg, &batch, &seqs, &targets, positives, &mut grads)?;
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                message: format!("loss {total}, ce {ce}, nal {nal}"),
            });
        }
        opt.step(&mut model.params.data, &grads);
        log.push(StepMetrics {
            step,
            ce,
            nal,
            total,
            positives,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutput { model, log, nal: counters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig, TokenCounts};

    pub(crate) fn small_data() -> crate::dataset::SyntheticData {
        generate_synthetic(&SyntheticConfig {
            num_users: 40,
            tokens_per_user: TokenCounts { ll: 32, rt: 16, imp: 16 },
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            steps,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let d = small_data();
        let data = TrainData {
            examples: &d.examples,
            users: d.store.index(),
        };
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let c = TrainConfig {
                lr: 0.0,
                optimizer,
                ..cfg(1)
            };
            let out = train(&data, &c).unwrap();
            let fresh = RankingModel::new(c.dims(), c.nn, true, c.seed).unwrap();
            assert_eq!(out.model.params.data, fresh.params.data);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let c = TrainConfig::default();
        let mut p = vec![0.5f32, -1.0, 0.0];
        let mut opt = Optimizer::new(&c, 3);
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![0.5, -1.0, 0.0]);
    }

    #[test]
    fn same_seed_is_deterministic_across_modes() {
        let d = small_data();
        let data = TrainData {
            examples: &d.examples,
            users: d.store.index(),
        };
        let a = train(&data, &cfg(3)).unwrap();
        let b = train(
            &data,
            &TrainConfig {
                parallelism: Parallelism::Sequential,
                ..cfg(3)
            },
        )
        .unwrap();
        assert_eq!(a.model.params.data, b.model.params.data);
        assert_eq!(a.log.iter().map(|m| m.total).collect::<Vec<_>>(), b.log.iter().map(|m| m.total).collect::<Vec<_>>());
    }

    #[test]
    fn logged_features_train_like_recomputed_ones() {
        let d = small_data();
        let c = cfg(2);
        let logged: Vec<TrainingExample> = d
            .examples
            .iter()
            .map(|e| {
                let mut e = e.clone();
                let user = &d.store.records[(e.user_id - 1) as usize].sequences;
                e.nn_features = Some(crate::nnsearch::assemble(user, &e.candidate, &c.nn));
                e
            })
            .collect();
        let with_users = TrainData {
            examples: &d.examples,
            users: d.store.index(),
        };
        let with_logs = TrainData {
            examples: &logged,
            users: d.store.index(),
        };
        let a = train(&with_users, &c).unwrap();
        let b = train(&with_logs, &c).unwrap();
        assert_eq!(a.model.params.data, b.model.params.data);
    }

    #[test]
    fn zero_nal_weight_matches_disabled_nal() {
        let d = small_data();
        let data = TrainData {
            examples: &d.examples,
            users: d.store.index(),
        };
        let on = TrainConfig {
            nal: Some(NalConfig {
                w_nal: 0.0,
                ..Default::default()
            }),
            ..cfg(4)
        };
        let off = TrainConfig { nal: None, ..cfg(4) };
        let a = train(&data, &on).unwrap();
        let b = train(&data, &off).unwrap();
        assert!(a.log.iter().all(|m| m.positives > 0));
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        assert_eq!(a.model.params.data, b.model.params.data);
    }

    #[test]
    fn loss_decreases() {
        let d = small_data();
        let data = TrainData {
            examples: &d.examples,
            users: d.store.index(),
        };
        let out = train(&data, &cfg(60)).unwrap();
        let first = out.log[0].total;
        let tail: f64 = out.log[50..].iter().map(|m| m.total).sum::<f64>() / 10.0;
        assert!(tail < first, "{first} -> {tail}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
