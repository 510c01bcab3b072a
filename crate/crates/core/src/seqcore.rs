//! Domain types for user action sequences and the int8 embedding codec.
//!
//! Item embeddings are 32-d content vectors whose components sit roughly in
//! `[-0.65, 0.65]`. Stored sequences keep them as symmetric int8:
//!
//! ```text
//! q = clamp(round(e / 0.65 * 127), -127, 127)
//! e = q / 127 * 0.65
//! ```
//!
//! Rounding is half-away-from-zero and `-128` is never produced. Dense
//! embedding values are kept in f64 so the codec's round trip is accurate to
//! half a quantization step; model arithmetic downstream runs in f32.

use crate::error::{Error, Result};

/// Dimensionality of item content embeddings.
pub const EMBED_DIM: usize = 32;

/// Magnitude mapped onto the int8 endpoint.
pub const QUANT_RANGE: f64 = 0.65;

/// Largest quantized magnitude; the code is symmetric.
pub const QUANT_MAX: i8 = 127;

/// Dense 32-d item embedding. Always finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Embedding([f64; EMBED_DIM]);

impl Embedding {
    pub fn new(values: [f64; EMBED_DIM]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "embedding component {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Embedding(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; EMBED_DIM] = values.try_into().map_err(|_| {
            Error::validation(format!(
                "embedding must have {EMBED_DIM} components, got {}",
                values.len()
            ))
        })?;
        Self::new(arr)
    }

    /// Widens f32 values (always exact).
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        let mut arr = [0f64; EMBED_DIM];
        if values.len() != EMBED_DIM {
            return Err(Error::validation(format!(
                "embedding must have {EMBED_DIM} components, got {}",
                values.len()
            )));
        }
        for (a, v) in arr.iter_mut().zip(values) {
            *a = f64::from(*v);
        }
        Self::new(arr)
    }

    pub const fn zeros() -> Self {
        Embedding([0.0; EMBED_DIM])
    }

    pub fn as_array(&self) -> &[f64; EMBED_DIM] {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Narrowed copy for f32 model inputs.
    pub fn to_f32(&self) -> [f32; EMBED_DIM] {
        self.0.map(|v| v as f32)
    }

    pub fn quantize(&self) -> QuantizedEmbedding {
        let mut out = [0i8; EMBED_DIM];
        for (q, &e) in out.iter_mut().zip(self.0.iter()) {
            *q = quantize_component(e);
        }
        QuantizedEmbedding(out)
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// 32 symmetric int8 codes in `[-127, 127]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct QuantizedEmbedding([i8; EMBED_DIM]);

impl QuantizedEmbedding {
    /// Rejects `-128`, which the codec never emits.
    pub fn new(codes: [i8; EMBED_DIM]) -> Result<Self> {
        if codes.contains(&i8::MIN) {
            return Err(Error::validation("quantized embedding contains -128"));
        }
        Ok(QuantizedEmbedding(codes))
    }

    pub const fn zeros() -> Self {
        QuantizedEmbedding([0; EMBED_DIM])
    }

    pub fn codes(&self) -> &[i8; EMBED_DIM] {
        &self.0
    }

    pub fn dequantize(&self) -> Embedding {
        let mut out = [0f64; EMBED_DIM];
        for (e, &q) in out.iter_mut().zip(self.0.iter()) {
            *e = dequantize_component(q);
        }
        Embedding(out)
    }
}

#[inline]
pub fn quantize_component(e: f64) -> i8 {
    let scaled = e / QUANT_RANGE * f64::from(QUANT_MAX);
    // f64::round rounds half away from zero.
    scaled.round().clamp(-127.0, 127.0) as i8
}

#[inline]
pub fn dequantize_component(q: i8) -> f64 {
    f64::from(q) / f64::from(QUANT_MAX) * QUANT_RANGE
}

/// Quantizes a raw 32-component slice, rejecting wrong lengths and non-finite values.
pub fn quantize(values: &[f64]) -> Result<QuantizedEmbedding> {
    Ok(Embedding::from_slice(values)?.quantize())
}

pub fn dequantize(q: &QuantizedEmbedding) -> Embedding {
    q.dequantize()
}

/// Unit-norm copy of `e`; the zero vector maps to itself.
///
/// The squared norm is accumulated in index order and every component is
/// divided (not multiplied by a reciprocal). The fused NN kernel mirrors this
/// exact operation order so both paths produce bit-identical scores.
pub fn l2_normalize(e: &Embedding) -> Embedding {
    let mut sumsq = 0f64;
    for &v in e.0.iter() {
        sumsq += v * v;
    }
    if sumsq == 0.0 {
        return Embedding::zeros();
    }
    let norm = sumsq.sqrt();
    let mut out = [0f64; EMBED_DIM];
    for (o, &v) in out.iter_mut().zip(e.0.iter()) {
        *o = v / norm;
    }
    Embedding(out)
}

/// Sequential dot product (index order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Prediction heads in their fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Repin = 0,
    Click = 1,
    Closeup = 2,
    Hide = 3,
}

pub const NUM_HEADS: usize = 4;

impl Head {
    pub const ALL: [Head; NUM_HEADS] = [Head::Repin, Head::Click, Head::Closeup, Head::Hide];

    pub fn name(self) -> &'static str {
        match self {
            Head::Repin => "repin",
            Head::Click => "click",
            Head::Closeup => "closeup",
            Head::Hide => "hide",
        }
    }

    /// Negative engagement: a lower hit rate is better.
    pub fn lower_is_better(self) -> bool {
        self == Head::Hide
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown head '{s}'")))
    }
}

/// Multi-hot action bitmask.
///
/// Bits 0..=4 are repin, click, closeup, hide and impression; 5..=15 are
/// reserved and still feed the action embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActionType(u16);

impl ActionType {
    pub const REPIN: u16 = 1 << 0;
    pub const CLICK: u16 = 1 << 1;
    pub const CLOSEUP: u16 = 1 << 2;
    pub const HIDE: u16 = 1 << 3;
    pub const IMPRESSION: u16 = 1 << 4;

    /// Bits that count as positive engagement.
    pub const POSITIVE_MASK: u16 = Self::REPIN | Self::CLICK | Self::CLOSEUP;

    /// Number of distinct bits, i.e. rows of the action embedding table.
    pub const NUM_BITS: usize = 16;

    pub fn new(bits: u16) -> Result<Self> {
        if bits == 0 {
            return Err(Error::validation("action bitmask has no bit set"));
        }
        if bits & Self::IMPRESSION != 0 && bits != Self::IMPRESSION {
            return Err(Error::validation(format!(
                "impression bit combined with other bits ({bits:#06x})"
            )));
        }
        Ok(ActionType(bits))
    }

    pub const fn impression() -> Self {
        ActionType(Self::IMPRESSION)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, bit: u16) -> bool {
        self.0 & bit != 0
    }

    pub fn is_positive(self) -> bool {
        self.0 & Self::POSITIVE_MASK != 0
    }

    pub fn is_impression(self) -> bool {
        self.0 == Self::IMPRESSION
    }

    /// Indices of set bits, lowest first.
    pub fn set_bits(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..Self::NUM_BITS).filter(move |b| bits & (1 << b) != 0)
    }
}

pub mod surface {
    pub const HOMEFEED: u8 = 0;
    pub const SEARCH: u8 = 1;
    pub const RELATED: u8 = 2;
    pub const OTHER: u8 = 3;

    /// Known ids pass through; anything else is treated as `OTHER`.
    pub fn canonical(id: u8) -> u8 {
        if id <= OTHER {
            id
        } else {
            OTHER
        }
    }
}

/// One user action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActionToken {
    pub timestamp: u32,
    pub action: ActionType,
    pub surface: u8,
    pub embedding: QuantizedEmbedding,
}

impl ActionToken {
    pub fn new(timestamp: u32, action: ActionType, surface: u8, embedding: QuantizedEmbedding) -> Result<Self> {
        if timestamp == 0 {
            return Err(Error::validation("action timestamp must be > 0"));
        }
        Ok(ActionToken {
            timestamp,
            action,
            surface,
            embedding,
        })
    }
}

/// Per-list length caps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SequenceCaps {
    pub lifelong: usize,
    pub realtime: usize,
    pub impression: usize,
}

impl Default for SequenceCaps {
    fn default() -> Self {
        SequenceCaps {
            lifelong: 16384,
            realtime: 256,
            impression: 256,
        }
    }
}

/// Lifelong, real-time and impression histories of one user, most recent first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserSequences {
    pub lifelong: Vec<ActionToken>,
    pub realtime: Vec<ActionToken>,
    pub impression: Vec<ActionToken>,
}

impl UserSequences {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn total_tokens(&self) -> usize {
        self.lifelong.len() + self.realtime.len() + self.impression.len()
    }

    pub fn validate(&self, caps: &SequenceCaps) -> Result<()> {
        let lists = [
            ("lifelong", &self.lifelong, caps.lifelong),
            ("realtime", &self.realtime, caps.realtime),
            ("impression", &self.impression, caps.impression),
        ];
        for (name, list, cap) in lists {
            if list.len() > cap {
                return Err(Error::validation(format!(
                    "{name} sequence has {} tokens, cap is {cap}",
                    list.len()
                )));
            }
            if let Some(i) = list.windows(2).position(|w| w[0].timestamp < w[1].timestamp) {
                return Err(Error::validation(format!(
                    "{name} sequence not sorted most-recent-first at index {}",
                    i + 1
                )));
            }
            if list.iter().any(|t| t.timestamp == 0) {
                return Err(Error::validation(format!("{name} sequence has a zero timestamp")));
            }
        }
        if self.lifelong.iter().chain(&self.realtime).any(|t| t.action.is_impression()) {
            return Err(Error::validation("engagement sequences contain impression-only tokens"));
        }
        if self.impression.iter().any(|t| !t.action.is_impression()) {
            return Err(Error::validation("impression sequence contains engagement tokens"));
        }
        Ok(())
    }

    /// Drops the oldest tokens beyond each cap.
    pub fn truncate_to(&mut self, caps: &SequenceCaps) {
        self.lifelong.truncate(caps.lifelong);
        self.realtime.truncate(caps.realtime);
        self.impression.truncate(caps.impression);
    }
}
