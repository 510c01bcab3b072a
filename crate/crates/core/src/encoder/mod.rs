//! Token encoding, the two-layer causal transformer and max pooling.
//!
//! Each assembled slot becomes `concat(token embedding, candidate) + action
//! rows (one per set bit) + surface row + position row`; padding rows are
//! zero. The transformer is pre-norm with one head. Two inference kernels
//! compute it: [`reference::forward_reference`] materializes every
//! intermediate matrix layer by layer, [`fused::forward_fused`] makes a single
//! causal sweep over row tiles. Both take workspace from a [`Scratch`].

pub mod fused;
pub mod params;
pub mod reference;

pub use fused::{forward_fused, forward_fused_pooled};
pub use params::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointMeta, Layout, LayerOffsets,
    ModelDims, Params, ACT_ROWS, CTX_DIM, SURF_ROWS,
};
pub use reference::forward_reference;

use crate::error::{Error, Result};
use crate::linalg::{mm_acc, Real};
use crate::nnsearch::{AssembledSequence, Slot};
use crate::scratch::Scratch;
use crate::seqcore::{l2_normalize, surface, ActionType, Embedding, EMBED_DIM};

/// Per-slot model inputs.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a, T> {
    /// `len × emb`, normalized, zero rows for padding.
    pub tokens: &'a [T],
    pub actions: &'a [u16],
    pub surfaces: &'a [u8],
    pub valid: &'a [bool],
}

impl<T> SeqInput<'_, T> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OwnedSeqInput<T> {
    pub tokens: Vec<T>,
    pub actions: Vec<u16>,
    pub surfaces: Vec<u8>,
    pub valid: Vec<bool>,
}

impl<T: Real> OwnedSeqInput<T> {
    pub fn padding(len: usize, emb: usize) -> Self {
        OwnedSeqInput {
            tokens: vec![T::zero(); len * emb],
            actions: vec![0; len],
            surfaces: vec![0; len],
            valid: vec![false; len],
        }
    }

    pub fn from_assembled(seq: &AssembledSequence) -> Self {
        let mut out = Self::padding(seq.len(), EMBED_DIM);
        fill_input(&seq.slots, &mut out.tokens, &mut out.actions, &mut out.surfaces, &mut out.valid);
        out
    }

    pub fn view(&self) -> SeqInput<'_, T> {
        SeqInput {
            tokens: &self.tokens,
            actions: &self.actions,
            surfaces: &self.surfaces,
            valid: &self.valid,
        }
    }
}

/// Writes model inputs for assembled slots into caller-provided buffers.
pub fn fill_input<T: Real>(slots: &[Slot], tokens: &mut [T], actions: &mut [u16], surfaces: &mut [u8], valid: &mut [bool]) {
    for (i, slot) in slots.iter().enumerate() {
        let row = &mut tokens[i * EMBED_DIM..(i + 1) * EMBED_DIM];
        match slot {
            Some(s) => {
                let e = l2_normalize(&s.token.embedding.dequantize());
                for (o, v) in row.iter_mut().zip(e.as_array()) {
                    *o = T::of(*v);
                }
                actions[i] = s.token.action.bits();
                surfaces[i] = s.token.surface;
                valid[i] = true;
            }
            None => {
                row.fill(T::zero());
                actions[i] = 0;
                surfaces[i] = 0;
                valid[i] = false;
            }
        }
    }
}

pub fn normalized_candidate<T: Real>(c: &Embedding, out: &mut [T]) {
    for (o, v) in out.iter_mut().zip(l2_normalize(c).as_array()) {
        *o = T::of(*v);
    }
}

/// Combined attention mask: causal, key padding, and an optional row-major
/// `len × len` allow-list.
#[derive(Clone, Copy, Debug)]
pub struct AttnMask<'a> {
    pub valid: &'a [bool],
    pub custom: Option<&'a [bool]>,
}

impl<'a> AttnMask<'a> {
    pub fn new(valid: &'a [bool]) -> Self {
        AttnMask { valid, custom: None }
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j <= i && self.valid[j] && self.custom.is_none_or(|m| m[i * self.valid.len() + j])
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Feature matrix `F` (`len × d_model`).
pub fn encode<T: Real>(input: &SeqInput<'_, T>, cand: &[T], p: &Params<T>, out: &mut [T]) -> Result<()> {
    let dims = p.dims();
    let (len, emb, d) = (input.len(), dims.emb, dims.d_model);
    if len != dims.seq_len {
        return Err(Error::validation(format!(
            "sequence length {len} does not match positional table ({})",
            dims.seq_len
        )));
    }
    if input.tokens.len() != len * emb || cand.len() != emb || out.len() != len * d {
        return Err(Error::validation("encode buffers have inconsistent shapes"));
    }
    let (act, surf, pos) = (p.t(&p.layout.act), p.t(&p.layout.surf), p.t(&p.layout.pos));
    for i in 0..len {
        let row = &mut out[i * d..(i + 1) * d];
        if !input.valid[i] {
            row.fill(T::zero());
            continue;
        }
        row[..emb].copy_from_slice(&input.tokens[i * emb..(i + 1) * emb]);
        row[emb..].copy_from_slice(cand);
        let action = input.actions[i];
        for b in 0..ActionType::NUM_BITS {
            if action & (1 << b) != 0 {
                add_row(row, &act[b * d..(b + 1) * d]);
            }
        }
        let s = surface::canonical(input.surfaces[i]) as usize;
        add_row(row, &surf[s * d..(s + 1) * d]);
        add_row(row, &pos[i * d..(i + 1) * d]);
    }
    Ok(())
}

#[inline]
fn add_row<T: Real>(row: &mut [T], src: &[T]) {
    for (r, s) in row.iter_mut().zip(src) {
        *r += *s;
    }
}

/// Elementwise max of `U·Wout` over valid rows; zeros when none is valid.
pub fn pool<T: Real, S: Scratch>(u: &[T], valid: &[bool], p: &Params<T>, scratch: &S, out: &mut [T]) {
    let d = p.dims().d_model;
    let len = valid.len();
    let y = scratch.alloc_fill(len * d, T::zero());
    mm_acc(len, d, d, u, p.t(&p.layout.wout), y);
    out[..d].fill(T::neg_infinity());
    let mut any = false;
    for i in (0..len).filter(|&i| valid[i]) {
        any = true;
        for (o, v) in out.iter_mut().zip(&y[i * d..(i + 1) * d]) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    if !any {
        out[..d].fill(T::zero());
    }
}
