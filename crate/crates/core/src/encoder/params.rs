use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::ByteReader;
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::nnsearch::NnConfig;
use crate::seqcore::{ActionType, EMBED_DIM, NUM_HEADS};

pub const ACT_ROWS: usize = ActionType::NUM_BITS;
pub const SURF_ROWS: usize = 256;
/// Request-context scalars fed to the head.
pub const CTX_DIM: usize = 8;

/// Shape of the ranking model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Item-embedding width; `d_model = 2 * emb`.
    pub emb: usize,
    pub d_model: usize,
    pub ffn: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub head_hidden: usize,
}

impl ModelDims {
    pub fn standard(seq_len: usize) -> Self {
        ModelDims {
            emb: EMBED_DIM,
            d_model: 2 * EMBED_DIM,
            ffn: 32,
            layers: 2,
            seq_len,
            head_hidden: 64,
        }
    }

    /// Shrunken model for finite-difference checks.
    pub fn tiny() -> Self {
        ModelDims {
            emb: 4,
            d_model: 8,
            ffn: 4,
            layers: 2,
            seq_len: 8,
            head_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != 2 * self.emb {
            return Err(Error::validation(format!(
                "d_model ({}) must be twice the embedding width ({})",
                self.d_model, self.emb
            )));
        }
        if self.emb == 0 || self.ffn == 0 || self.layers == 0 || self.seq_len == 0 || self.head_hidden == 0 {
            return Err(Error::validation("model dimensions must be >= 1"));
        }
        Ok(())
    }

    pub fn head_in(&self) -> usize {
        self.d_model + self.emb + CTX_DIM
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub w2: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    One,
    /// Normal with this standard deviation.
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    init: Init,
}

/// Where every tensor lives inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub dims: ModelDims,
    pub tensors: Vec<TensorSpec>,
    pub act: Range<usize>,
    pub surf: Range<usize>,
    pub pos: Range<usize>,
    pub layers: Vec<LayerOffsets>,
    pub wout: Range<usize>,
    pub head_w1: Range<usize>,
    pub head_b1: Range<usize>,
    pub head_w2: Range<usize>,
    pub head_b2: Range<usize>,
    pub nal_proj: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(dims: ModelDims) -> Self {
        let mut tensors = Vec::new();
        let mut next = 0;
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            let n: usize = shape.iter().product();
            let range = next..next + n;
            next += n;
            tensors.push(TensorSpec {
                name,
                shape,
                range: range.clone(),
                init,
            });
            range
        };
        let d = dims.d_model;
        let w = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
        let act = add("act".into(), vec![ACT_ROWS, d], Init::Normal(0.1));
        let surf = add("surf".into(), vec![SURF_ROWS, d], Init::Normal(0.1));
        let pos = add("pos".into(), vec![dims.seq_len, d], Init::Normal(0.1));
        let layers = (0..dims.layers)
            .map(|l| LayerOffsets {
                ln1_g: add(format!("layer{l}.ln1.gamma"), vec![d], Init::One),
                ln1_b: add(format!("layer{l}.ln1.beta"), vec![d], Init::Zero),
                wq: add(format!("layer{l}.wq"), vec![d, d], w(d)),
                wk: add(format!("layer{l}.wk"), vec![d, d], w(d)),
                wv: add(format!("layer{l}.wv"), vec![d, d], w(d)),
                wo: add(format!("layer{l}.wo"), vec![d, d], w(d)),
                ln2_g: add(format!("layer{l}.ln2.gamma"), vec![d], Init::One),
                ln2_b: add(format!("layer{l}.ln2.beta"), vec![d], Init::Zero),
                w1: add(format!("layer{l}.w1"), vec![d, dims.ffn], w(d)),
                w2: add(format!("layer{l}.w2"), vec![dims.ffn, d], w(dims.ffn)),
            })
            .collect();
        let wout = add("wout".into(), vec![d, d], w(d));
        let head_w1 = add("head.w1".into(), vec![dims.head_in(), dims.head_hidden], w(dims.head_in()));
        let head_b1 = add("head.b1".into(), vec![dims.head_hidden], Init::Zero);
        let head_w2 = add("head.w2".into(), vec![dims.head_hidden, NUM_HEADS], w(dims.head_hidden));
        let head_b2 = add("head.b2".into(), vec![NUM_HEADS], Init::Zero);
        let nal_proj = add("nal.proj".into(), vec![d, dims.emb], w(d));
        Layout {
            dims,
            tensors,
            act,
            surf,
            pos,
            layers,
            wout,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            nal_proj,
            len: next,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// All trainable parameters of the ranking model in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        let layout = Layout::new(dims);
        let data = vec![T::zero(); layout.len];
        Params { layout, data }
    }

    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &p.layout.tensors {
            let out = &mut p.data[t.range.clone()];
            match t.init {
                Init::Zero => {}
                Init::One => out.fill(T::one()),
                Init::Normal(sd) => {
                    let n = Normal::new(0.0, sd).expect("finite sd");
                    for x in out.iter_mut() {
                        // Round through f32 so f32 and f64 models start identical.
                        *x = T::of(f64::from(n.sample(&mut rng) as f32));
                    }
                }
            }
        }
        Ok(p)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.layout.dims
    }

    #[inline]
    pub fn t(&self, r: &Range<usize>) -> &[T] {
        &self.data[r.clone()]
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64().expect("finite"))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Model options stored alongside the tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    /// False for the no-sequence baseline: pooled features are always zero.
    pub use_sequence: bool,
    /// Segment layout the sequence inputs must follow.
    pub nn: NnConfig,
}

/// Checkpoint layout (little-endian):
///
/// ```text
/// "SRCK" | version u16 | meta_len u32 | meta (JSON) | tensor_count u32
/// per tensor: name_len u16 | name | ndim u8 | dims u32 x ndim | byte offset u64
/// data: all tensors as packed f32, offsets relative to the start of data
/// ```
pub fn encode_checkpoint(params: &Params<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.dims != params.layout.dims {
        return Err(Error::validation("checkpoint meta does not match parameter dims"));
    }
    let mut out = Vec::with_capacity(64 + params.data.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).map_err(|e| Error::validation(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.layout.tensors.len() as u32).to_le_bytes());
    for t in &params.layout.tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &s in &t.shape {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(&((t.range.start * 4) as u64).to_le_bytes());
    }
    for x in &params.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Params<f32>, CheckpointMeta)> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected SRCK"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let at = r.offset();
    let meta: CheckpointMeta =
        serde_json::from_slice(r.bytes(meta_len)?).map_err(|e| Error::format(at, format!("bad meta: {e}")))?;
    meta.dims.validate().map_err(|e| Error::format(at, e.to_string()))?;
    meta.nn.expect_len(meta.dims.seq_len).map_err(|e| Error::format(at, e.to_string()))?;
    let layout = Layout::new(meta.dims);
    let at = r.offset();
    let count = r.u32()? as usize;
    if count != layout.tensors.len() {
        return Err(Error::format(at, format!("expected {} tensors, found {count}", layout.tensors.len())));
    }
    for t in &layout.tensors {
        let at = r.offset();
        let name_len = r.u16()? as usize;
        let name = r.bytes(name_len)?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()?;
        if name != t.name.as_bytes() || shape != t.shape || offset != (t.range.start * 4) as u64 {
            return Err(Error::format(at, format!("manifest entry does not match tensor {}", t.name)));
        }
    }
    if r.remaining() != layout.len * 4 {
        return Err(Error::format(
            r.offset(),
            format!("expected {} data bytes, found {}", layout.len * 4, r.remaining()),
        ));
    }
    let mut data = Vec::with_capacity(layout.len);
    for _ in 0..layout.len {
        data.push(r.f32()?);
    }
    Ok((Params { layout, data }, meta))
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &Params<f32>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, meta)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(Params<f32>, CheckpointMeta)> {
    decode_checkpoint(&std::fs::read(path)?)
}
