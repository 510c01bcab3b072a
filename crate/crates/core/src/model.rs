//! The ranking model: sequence encoder, max-pooled summary and an MLP head
//! over `[pooled, candidate, context]` producing one logit per head.
//!
//! Training runs a forward pass that keeps every activation (the tape) and a
//! hand-written reverse pass over it. Serving uses the allocation-free
//! kernels from [`crate::encoder`] and never touches the tape.

use std::borrow::Cow;
use std::ops::Range;
use std::path::Path;

use crate::dataset::TrainingExample;
use crate::encoder::{
    encode, normalized_candidate, forward_fused_pooled, forward_reference, pool, read_checkpoint, write_checkpoint, AttnMask, CheckpointMeta,
    ModelDims, OwnedSeqInput, Params, SeqInput, CTX_DIM,
};
use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, gemm, layer_norm_row, layer_norm_row_backward, mm_acc, sigmoid, Op, Real};
use crate::losses::{nal_logits_loss, weighted_ce_logits, NalLossType, NalTarget};
use crate::scratch::Scratch;
use crate::nnsearch::{assemble, AssembledSequence, NnConfig};
use crate::seqcore::{surface, ActionType, UserSequences, EMBED_DIM, NUM_HEADS};

#[derive(Clone, Debug, PartialEq)]
pub struct RankingModel {
    pub params: Params<f32>,
    /// False for the no-sequence baseline: the pooled features are zero and
    /// the encoder is never run.
    pub use_sequence: bool,
    /// Layout of the assembled sequence the encoder was trained on.
    pub nn: NnConfig,
}

impl RankingModel {
    pub fn new(dims: ModelDims, nn: NnConfig, use_sequence: bool, seed: u64) -> Result<Self> {
        nn.expect_len(dims.seq_len)?;
        Ok(RankingModel {
            params: Params::init(dims, seed)?,
            use_sequence,
            nn,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        self.params.dims()
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            dims: *self.dims(),
            use_sequence: self.use_sequence,
            nn: self.nn,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.params, &self.meta())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = read_checkpoint(path)?;
        Ok(RankingModel {
            params,
            use_sequence: meta.use_sequence,
            nn: meta.nn,
        })
    }
}

/// Eight request-context scalars: sine and cosine of the minute of the hour,
/// hour of the day, day of the week and day of the year.
pub fn context_features(ts: u32) -> [f64; CTX_DIM] {
    use std::f64::consts::TAU;
    let t = f64::from(ts);
    let days = (ts / 86_400) as f64;
    let angles = [
        TAU * (t % 3600.0) / 3600.0,
        TAU * (t % 86_400.0) / 86_400.0,
        // 1970-01-01 was a Thursday; offset so Monday is 0.
        TAU * ((days + 3.0) % 7.0) / 7.0,
        TAU * (days % 365.0) / 365.0,
    ];
    let mut out = [0.0; CTX_DIM];
    for (i, a) in angles.iter().enumerate() {
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

/// Inputs of one example in model precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleInput<T> {
    pub seq: OwnedSeqInput<T>,
    /// Normalized candidate embedding.
    pub cand: Vec<T>,
    pub ctx: [T; CTX_DIM],
    pub labels: [bool; NUM_HEADS],
}

/// Assembled sequence of a training example: the logged features when
/// present, otherwise recomputed from the user's sequences.
pub fn assembled_for<'a>(
    ex: &'a TrainingExample,
    user: Option<&UserSequences>,
    nn: &NnConfig,
) -> Result<Cow<'a, AssembledSequence>> {
    match &ex.nn_features {
        Some(seq) => {
            nn.expect_len(seq.len())?;
            Ok(Cow::Borrowed(seq))
        }
        None => {
            let user = user.ok_or_else(|| Error::validation(format!("no sequences for user {}", ex.user_id)))?;
            Ok(Cow::Owned(assemble(user, &ex.candidate, nn)))
        }
    }
}

pub fn example_input<T: Real>(ex: &TrainingExample, seq: &AssembledSequence) -> ExampleInput<T> {
    let mut cand = vec![T::zero(); EMBED_DIM];
    normalized_candidate(&ex.candidate, &mut cand);
    ExampleInput {
        seq: OwnedSeqInput::from_assembled(seq),
        cand,
        ctx: context_features(ex.request_ts).map(T::of),
        labels: ex.labels.0,
    }
}

/// How one example's losses enter the batch objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub head: [f64; NUM_HEADS],
    /// Multiplies this example's cross-entropy (1 / batch size).
    pub ce_scale: f64,
    /// Multiplies each NAL term (w_nal / positives in the batch).
    pub nal_scale: f64,
    pub nal_kind: NalLossType,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExampleLoss {
    pub ce: f64,
    /// Unscaled sum of this example's NAL terms.
    pub nal: f64,
}

struct LayerTape<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
}

/// Saved activations of a training forward pass.
pub struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    pub u: Vec<T>,
}

/// Transformer forward keeping every activation; uses the packed gemm.
pub fn forward_train<T: Real>(f: &[T], mask: &AttnMask<'_>, p: &Params<T>) -> Tape<T> {
    let dims = p.dims();
    let (len, d, ffn) = (mask.len(), dims.d_model, dims.ffn);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut x = f.to_vec();
    let mut layers = Vec::with_capacity(dims.layers);
    for lo in &p.layout.layers {
        let mut xhat1 = vec![T::zero(); len * d];
        let mut rstd1 = vec![T::zero(); len];
        let mut h1 = vec![T::zero(); len * d];
        for i in 0..len {
            let r = i * d..(i + 1) * d;
            rstd1[i] = layer_norm_row(&x[r.clone()], p.t(&lo.ln1_g), p.t(&lo.ln1_b), &mut xhat1[r.clone()], &mut h1[r]);
        }
        let proj = |w: &Range<usize>| {
            let mut out = vec![T::zero(); len * d];
            gemm(len, d, d, &h1, Op::N, p.t(w), Op::N, T::zero(), &mut out);
            out
        };
        let (q, k, v) = (proj(&lo.wq), proj(&lo.wk), proj(&lo.wv));
        let mut probs = vec![T::zero(); len * len];
        gemm(len, d, len, &q, Op::N, &k, Op::T, T::zero(), &mut probs);
        for i in 0..len {
            let row = &mut probs[i * len..(i + 1) * len];
            let mut max = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                if mask.allowed(i, j) {
                    *s *= scale;
                    max = max.max(*s);
                } else {
                    *s = T::neg_infinity();
                }
            }
            if max == T::neg_infinity() {
                row.fill(T::zero());
                continue;
            }
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        let mut att = vec![T::zero(); len * d];
        gemm(len, len, d, &probs, Op::N, &v, Op::N, T::zero(), &mut att);
        let mut x_mid = x.clone();
        gemm(len, d, d, &att, Op::N, p.t(&lo.wo), Op::N, T::one(), &mut x_mid);
        let mut xhat2 = vec![T::zero(); len * d];
        let mut rstd2 = vec![T::zero(); len];
        let mut h2 = vec![T::zero(); len * d];
        for i in 0..len {
            let r = i * d..(i + 1) * d;
            rstd2[i] = layer_norm_row(&x_mid[r.clone()], p.t(&lo.ln2_g), p.t(&lo.ln2_b), &mut xhat2[r.clone()], &mut h2[r]);
        }
        let mut f1 = vec![T::zero(); len * ffn];
        gemm(len, d, ffn, &h2, Op::N, p.t(&lo.w1), Op::N, T::zero(), &mut f1);
        let g: Vec<T> = f1.iter().map(|&z| gelu(z)).collect();
        let mut x_out = x_mid.clone();
        gemm(len, ffn, d, &g, Op::N, p.t(&lo.w2), Op::N, T::one(), &mut x_out);
        layers.push(LayerTape {
            xhat1,
            rstd1,
            h1,
            q,
            k,
            v,
            probs,
            att,
            xhat2,
            rstd2,
            h2,
            f1,
            g,
        });
        x = x_out;
    }
    Tape { layers, u: x }
}

/// Two disjoint mutable ranges of one slice.
fn two_mut<'a, T>(s: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = s.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Reverse pass of [`forward_train`]. `du` is `dL/dU`; parameter gradients
/// accumulate into `grads`, and `dL/dF` is written to `df`.
pub fn backward_train<T: Real>(tape: &Tape<T>, mask: &AttnMask<'_>, du: &[T], p: &Params<T>, grads: &mut [T], df: &mut [T]) {
    let dims = p.dims();
    let (len, d, ffn) = (mask.len(), dims.d_model, dims.ffn);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dx = du.to_vec();
    let mut dg = vec![T::zero(); len * ffn];
    let mut dh = vec![T::zero(); len * d];
    let mut datt = vec![T::zero(); len * d];
    let mut dp = vec![T::zero(); len * len];
    let mut dq = vec![T::zero(); len * d];
    let mut dk = vec![T::zero(); len * d];
    let mut dv = vec![T::zero(); len * d];
    for (lo, t) in p.layout.layers.iter().zip(&tape.layers).rev() {
        // x_out = x_mid + gelu(LN2(x_mid)·W1)·W2
        gemm(ffn, len, d, &t.g, Op::T, &dx, Op::N, T::one(), &mut grads[lo.w2.clone()]);
        gemm(len, d, ffn, &dx, Op::N, p.t(&lo.w2), Op::T, T::zero(), &mut dg);
        for (z, &pre) in dg.iter_mut().zip(&t.f1) {
            *z *= gelu_grad(pre);
        }
        gemm(d, len, ffn, &t.h2, Op::T, &dg, Op::N, T::one(), &mut grads[lo.w1.clone()]);
        gemm(len, ffn, d, &dg, Op::N, p.t(&lo.w1), Op::T, T::zero(), &mut dh);
        let mut dx_mid = dx.clone();
        {
            let (dgam, dbet) = two_mut(grads, &lo.ln2_g, &lo.ln2_b);
            for i in 0..len {
                let r = i * d..(i + 1) * d;
                layer_norm_row_backward(&dh[r.clone()], &t.xhat2[r.clone()], t.rstd2[i], p.t(&lo.ln2_g), dgam, dbet, &mut dx_mid[r]);
            }
        }

        // x_mid = x_in + (P·V)·Wo
        gemm(d, len, d, &t.att, Op::T, &dx_mid, Op::N, T::one(), &mut grads[lo.wo.clone()]);
        gemm(len, d, d, &dx_mid, Op::N, p.t(&lo.wo), Op::T, T::zero(), &mut datt);
        gemm(len, d, len, &datt, Op::N, &t.v, Op::T, T::zero(), &mut dp);
        gemm(len, len, d, &t.probs, Op::T, &datt, Op::N, T::zero(), &mut dv);
        for i in 0..len {
            let pr = &t.probs[i * len..(i + 1) * len];
            let row = &mut dp[i * len..(i + 1) * len];
            let mut s = T::zero();
            for (a, b) in pr.iter().zip(row.iter()) {
                s += *a * *b;
            }
            for (x, &pv) in row.iter_mut().zip(pr) {
                *x = pv * (*x - s) * scale;
            }
        }
        gemm(len, len, d, &dp, Op::N, &t.k, Op::N, T::zero(), &mut dq);
        gemm(len, len, d, &dp, Op::T, &t.q, Op::N, T::zero(), &mut dk);
        gemm(d, len, d, &t.h1, Op::T, &dq, Op::N, T::one(), &mut grads[lo.wq.clone()]);
        gemm(d, len, d, &t.h1, Op::T, &dk, Op::N, T::one(), &mut grads[lo.wk.clone()]);
        gemm(d, len, d, &t.h1, Op::T, &dv, Op::N, T::one(), &mut grads[lo.wv.clone()]);
        gemm(len, d, d, &dq, Op::N, p.t(&lo.wq), Op::T, T::zero(), &mut dh);
        gemm(len, d, d, &dk, Op::N, p.t(&lo.wk), Op::T, T::one(), &mut dh);
        gemm(len, d, d, &dv, Op::N, p.t(&lo.wv), Op::T, T::one(), &mut dh);
        dx.copy_from_slice(&dx_mid);
        let (dgam, dbet) = two_mut(grads, &lo.ln1_g, &lo.ln1_b);
        for i in 0..len {
            let r = i * d..(i + 1) * d;
            layer_norm_row_backward(&dh[r.clone()], &t.xhat1[r.clone()], t.rstd1[i], p.t(&lo.ln1_g), dgam, dbet, &mut dx[r]);
        }
    }
    df.copy_from_slice(&dx);
}

/// Scatters `dL/dF` into the action, surface and position tables.
fn encode_backward<T: Real>(input: &SeqInput<'_, T>, df: &[T], p: &Params<T>, grads: &mut [T]) {
    let d = p.dims().d_model;
    let l = &p.layout;
    for i in (0..input.len()).filter(|&i| input.valid[i]) {
        let row = &df[i * d..(i + 1) * d];
        let action = input.actions[i];
        let s = surface::canonical(input.surfaces[i]) as usize;
        let mut targets = [l.surf.start + s * d, l.pos.start + i * d].to_vec();
        targets.extend((0..ActionType::NUM_BITS).filter(|b| action & (1 << b) != 0).map(|b| l.act.start + b * d));
        for start in targets {
            for (g, x) in grads[start..start + d].iter_mut().zip(row) {
                *g += *x;
            }
        }
    }
}

/// Loss of one example and, when `grads` is given, its gradient.
pub fn example_loss_grad<T: Real>(
    p: &Params<T>,
    use_sequence: bool,
    ex: &ExampleInput<T>,
    targets: &[NalTarget],
    w: &LossWeights,
    grads: Option<&mut [T]>,
) -> Result<ExampleLoss> {
    let dims = *p.dims();
    let (d, emb, len) = (dims.d_model, dims.emb, dims.seq_len);
    let (hin, hid) = (dims.head_in(), dims.head_hidden);
    let l = &p.layout;
    let input = ex.seq.view();
    let mask = AttnMask::new(input.valid);

    // Encoder and pooling.
    let mut pooled = vec![T::zero(); d];
    let mut argmax = vec![usize::MAX; d];
    let mut tape = None;
    if use_sequence {
        let mut f = vec![T::zero(); len * d];
        encode(&input, &ex.cand, p, &mut f)?;
        let t = forward_train(&f, &mask, p);
        let mut y = vec![T::zero(); len * d];
        gemm(len, d, d, &t.u, Op::N, p.t(&l.wout), Op::N, T::zero(), &mut y);
        for c in 0..d {
            let mut best = T::neg_infinity();
            for i in (0..len).filter(|&i| input.valid[i]) {
                if y[i * d + c] > best {
                    best = y[i * d + c];
                    argmax[c] = i;
                }
            }
            if argmax[c] != usize::MAX {
                pooled[c] = best;
            }
        }
        tape = Some(t);
    } else if !targets.is_empty() {
        return Err(Error::validation("next-action targets need the sequence encoder"));
    }

    // Head.
    let mut z = Vec::with_capacity(hin);
    z.extend_from_slice(&pooled);
    z.extend_from_slice(&ex.cand);
    z.extend_from_slice(&ex.ctx);
    let mut hpre = p.t(&l.head_b1).to_vec();
    gemm(1, hin, hid, &z, Op::N, p.t(&l.head_w1), Op::N, T::one(), &mut hpre);
    let a: Vec<T> = hpre.iter().map(|&x| gelu(x)).collect();
    let mut logits = p.t(&l.head_b2).to_vec();
    gemm(1, hid, NUM_HEADS, &a, Op::N, p.t(&l.head_w2), Op::N, T::one(), &mut logits);
    let mut dlogits = [T::zero(); NUM_HEADS];
    let ce = weighted_ce_logits(&logits, &ex.labels, &w.head, T::of(w.ce_scale), &mut dlogits);

    // Next-action terms.
    let proj = p.t(&l.nal_proj);
    let mut du = vec![T::zero(); if use_sequence { len * d } else { 0 }];
    let mut nal = 0.0;
    let mut dproj = vec![T::zero(); if grads.is_some() { d * emb } else { 0 }];
    for t in targets {
        let u = &tape.as_ref().expect("sequence encoder ran").u[t.slot * d..(t.slot + 1) * d];
        let mut zt = vec![T::zero(); emb];
        gemm(1, d, emb, u, Op::N, proj, Op::N, T::zero(), &mut zt);
        let vecs: Vec<&Vec<f64>> = std::iter::once(&t.positive).chain(&t.negatives).collect();
        let logits: Vec<T> = vecs
            .iter()
            .map(|e| zt.iter().zip(e.iter()).fold(T::zero(), |s, (a, b)| s + *a * T::of(*b)))
            .collect();
        let mut g = vec![T::zero(); logits.len()];
        nal += nal_logits_loss(w.nal_kind, &logits, Some(&mut g)).to_f64().expect("finite");
        if grads.is_some() {
            let mut dz = vec![T::zero(); emb];
            for (gi, e) in g.iter().zip(&vecs) {
                for (dzc, ec) in dz.iter_mut().zip(e.iter()) {
                    *dzc += T::of(w.nal_scale) * *gi * T::of(*ec);
                }
            }
            // dP += u ⊗ dz; du += P·dz
            gemm(d, 1, emb, u, Op::T, &dz, Op::N, T::one(), &mut dproj);
            gemm(1, emb, d, &dz, Op::N, proj, Op::T, T::one(), &mut du[t.slot * d..(t.slot + 1) * d]);
        }
    }
    let loss = ExampleLoss {
        ce: ce.to_f64().expect("finite"),
        nal,
    };
    let Some(grads) = grads else {
        return Ok(loss);
    };
    for (g, x) in grads[l.nal_proj.clone()].iter_mut().zip(&dproj) {
        *g += *x;
    }

    // Head backward.
    gemm(hid, 1, NUM_HEADS, &a, Op::T, &dlogits, Op::N, T::one(), &mut grads[l.head_w2.clone()]);
    for (g, x) in grads[l.head_b2.clone()].iter_mut().zip(&dlogits) {
        *g += *x;
    }
    let mut dh = vec![T::zero(); hid];
    gemm(1, NUM_HEADS, hid, &dlogits, Op::N, p.t(&l.head_w2), Op::T, T::zero(), &mut dh);
    for (x, &pre) in dh.iter_mut().zip(&hpre) {
        *x *= gelu_grad(pre);
    }
    gemm(hin, 1, hid, &z, Op::T, &dh, Op::N, T::one(), &mut grads[l.head_w1.clone()]);
    for (g, x) in grads[l.head_b1.clone()].iter_mut().zip(&dh) {
        *g += *x;
    }
    let Some(tape) = tape else {
        return Ok(loss);
    };
    let mut dz = vec![T::zero(); hin];
    gemm(1, hid, hin, &dh, Op::N, p.t(&l.head_w1), Op::T, T::zero(), &mut dz);

    // Pooling backward: each output column routes to its argmax row.
    let wout = p.t(&l.wout);
    for c in 0..d {
        let i = argmax[c];
        if i == usize::MAX {
            continue;
        }
        let dpc = dz[c];
        for k in 0..d {
            grads[l.wout.start + k * d + c] += tape.u[i * d + k] * dpc;
            du[i * d + k] += wout[k * d + c] * dpc;
        }
    }
    let mut df = vec![T::zero(); len * d];
    backward_train(&tape, &mask, &du, p, grads, &mut df);
    encode_backward(&input, &df, p, grads);
    Ok(loss)
}

/// Which transformer kernel serves a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Reference,
    Fused,
}

/// Head probabilities for one item, using only `scratch` for workspace.
#[allow(clippy::too_many_arguments)]
pub fn score<S: Scratch>(
    p: &Params<f32>,
    use_sequence: bool,
    input: &SeqInput<'_, f32>,
    cand: &[f32],
    ctx: &[f32],
    kernel: Kernel,
    scratch: &S,
    out: &mut [f32; NUM_HEADS],
) -> Result<()> {
    let dims = p.dims();
    let (d, len, hin, hid) = (dims.d_model, dims.seq_len, dims.head_in(), dims.head_hidden);
    let l = &p.layout;
    let z = scratch.alloc_fill(hin, 0.0f32);
    if use_sequence {
        let f = scratch.alloc_fill(len * d, 0.0f32);
        encode(input, cand, p, f)?;
        let mask = AttnMask::new(input.valid);
        match kernel {
            Kernel::Reference => {
                let u = scratch.alloc_fill(len * d, 0.0f32);
                forward_reference(f, &mask, p, scratch, u);
                pool(u, input.valid, p, scratch, &mut z[..d]);
            }
            Kernel::Fused => forward_fused_pooled(f, &mask, p, scratch, &mut z[..d]),
        }
    }
    z[d..d + dims.emb].copy_from_slice(cand);
    z[d + dims.emb..].copy_from_slice(ctx);
    let h = scratch.alloc_copy(p.t(&l.head_b1));
    mm_acc(1, hin, hid, z, p.t(&l.head_w1), h);
    for x in h.iter_mut() {
        *x = gelu(*x);
    }
    out.copy_from_slice(p.t(&l.head_b2));
    mm_acc(1, hid, NUM_HEADS, h, p.t(&l.head_w2), out);
    for x in out.iter_mut() {
        *x = sigmoid(*x);
    }
    Ok(())
}
