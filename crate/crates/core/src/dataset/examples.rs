//! Training-example file (`.tex2`).
//!
//! ```text
//! header (22 bytes):
//! 0       4     magic "TEX2"
//! 4       2     version (1)
//! 6       8     record count
//! 14      8     NN layout: r, k_ll, k_rt, k_imp as u16
//!
//! record:
//! 0       8     user_id
//! 8       8     chunk_id
//! 16      8     item_id
//! 24      4     request timestamp
//! 28      128   candidate embedding, 32 x f32
//! 156     4     labels, one byte per head (repin, click, closeup, hide)
//! 160     1     1 if NN features follow, else 0
//! 161     8     NN features: segment fill counts, 4 x u16
//! 169     43*L  NN features: L slots of (source u32, token 39 bytes);
//!               padding is source 0xFFFFFFFF and 39 zero bytes
//! ```
//!
//! The logged NN features are the assembled model input, so a record's size
//! does not depend on the length of the user's lifelong history.

use std::path::Path;

use super::ByteReader;
use crate::error::{Error, Result};
use crate::nnsearch::{AssembledSequence, NnConfig};
use crate::seqcore::{Embedding, Head, EMBED_DIM, NUM_HEADS};

pub const EXAMPLE_MAGIC: &[u8; 4] = b"TEX2";
pub const EXAMPLE_VERSION: u16 = 1;
pub const EXAMPLE_HEADER_BYTES: usize = 22;
const FIXED_RECORD_BYTES: usize = 8 + 8 + 8 + 4 + EMBED_DIM * 4 + NUM_HEADS + 1;

/// Binary labels in head order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Labels(pub [bool; NUM_HEADS]);

impl Labels {
    pub fn get(&self, head: Head) -> bool {
        self.0[head as usize]
    }

    pub fn set(&mut self, head: Head, v: bool) {
        self.0[head as usize] = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub user_id: u64,
    pub chunk_id: u64,
    pub item_id: u64,
    /// Request time; drives the context features.
    pub request_ts: u32,
    /// Stored as f32 on disk; values must be f32-representable to round-trip exactly.
    pub candidate: Embedding,
    pub labels: Labels,
    /// Pre-computed assembled sequence logged at serving time.
    pub nn_features: Option<AssembledSequence>,
}

impl TrainingExample {
    pub fn encoded_len(&self, cfg: &NnConfig) -> usize {
        FIXED_RECORD_BYTES + self.nn_features.as_ref().map_or(0, |_| AssembledSequence::encoded_len(cfg.seq_len()))
    }

    pub fn write_to(&self, cfg: &NnConfig, out: &mut Vec<u8>) -> Result<()> {
        if let Some(nn) = &self.nn_features {
            if nn.len() != cfg.seq_len() || nn.segments.iter().zip(cfg.segments()).any(|(a, b)| a.capacity != b.capacity) {
                return Err(Error::validation(format!(
                    "nn_features layout does not match configured length {}",
                    cfg.seq_len()
                )));
            }
        }
        out.extend_from_slice(&self.user_id.to_le_bytes());
        out.extend_from_slice(&self.chunk_id.to_le_bytes());
        out.extend_from_slice(&self.item_id.to_le_bytes());
        out.extend_from_slice(&self.request_ts.to_le_bytes());
        for v in self.candidate.to_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.0.iter().map(|&l| u8::from(l)));
        match &self.nn_features {
            Some(nn) => {
                out.push(1);
                nn.write_to(out);
            }
            None => out.push(0),
        }
        Ok(())
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>, cfg: &NnConfig) -> Result<Self> {
        let user_id = r.u64()?;
        let chunk_id = r.u64()?;
        let item_id = r.u64()?;
        let request_ts = r.u32()?;
        let at = r.offset();
        let mut cand = [0f32; EMBED_DIM];
        for v in cand.iter_mut() {
            *v = r.f32()?;
        }
        let candidate = Embedding::from_f32(&cand).map_err(|e| Error::format(at, e.to_string()))?;
        let mut labels = Labels::default();
        for l in labels.0.iter_mut() {
            let at = r.offset();
            *l = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(Error::format(at, format!("label byte {other} not in {{0, 1}}"))),
            };
        }
        let at = r.offset();
        let nn_features = match r.u8()? {
            0 => None,
            1 => Some(AssembledSequence::read_from(r, cfg)?),
            other => return Err(Error::format(at, format!("bad NN-features flag {other}"))),
        };
        Ok(TrainingExample {
            user_id,
            chunk_id,
            item_id,
            request_ts,
            candidate,
            labels,
            nn_features,
        })
    }
}

/// Contents of a `.tex2` file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleFile {
    pub nn: NnConfig,
    pub examples: Vec<TrainingExample>,
}

impl ExampleFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.nn.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(EXAMPLE_MAGIC);
        out.extend_from_slice(&EXAMPLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.examples.len() as u64).to_le_bytes());
        for v in [self.nn.r, self.nn.k_ll, self.nn.k_rt, self.nn.k_imp] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for ex in &self.examples {
            ex.write_to(&self.nn, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.bytes(4)? != EXAMPLE_MAGIC {
            return Err(Error::format(0, "bad magic, expected TEX2"));
        }
        let version = r.u16()?;
        if version != EXAMPLE_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let nn = NnConfig {
            r: r.u16()? as usize,
            k_ll: r.u16()? as usize,
            k_rt: r.u16()? as usize,
            k_imp: r.u16()? as usize,
        };
        nn.validate().map_err(|e| Error::format(14, e.to_string()))?;
        if count > (r.remaining() / FIXED_RECORD_BYTES) as u64 {
            return Err(Error::format(6, format!("record count {count} exceeds file size")));
        }
        let mut examples = Vec::with_capacity(count as usize);
        for _ in 0..count {
            examples.push(TrainingExample::read_from(&mut r, &nn)?);
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), format!("{} bytes after last record", r.remaining())));
        }
        Ok(ExampleFile { nn, examples })
    }
}

pub fn write_examples(path: impl AsRef<Path>, file: &ExampleFile) -> Result<()> {
    std::fs::write(path, file.encode()?)?;
    Ok(())
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<ExampleFile> {
    ExampleFile::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnsearch::assemble;
    use crate::nnsearch::test_util::*;

    fn example(rng: &mut impl rand::Rng, cfg: &NnConfig, with_nn: bool) -> TrainingExample {
        let user = random_user(rng, 50, 20, 20);
        let candidate = random_embedding(rng);
        TrainingExample {
            user_id: 7,
            chunk_id: 3,
            item_id: 99,
            request_ts: 1_700_000_123,
            candidate,
            labels: Labels([true, false, false, true]),
            nn_features: with_nn.then(|| assemble(&user, &candidate, cfg)),
        }
    }

    #[test]
    fn round_trip_with_and_without_features() {
        let cfg = NnConfig { r: 4, k_ll: 8, k_rt: 2, k_imp: 2 };
        let mut rng = rng(1);
        let file = ExampleFile {
            nn: cfg,
            examples: vec![example(&mut rng, &cfg, true), example(&mut rng, &cfg, false)],
        };
        let bytes = file.encode().unwrap();
        assert_eq!(bytes.len(), 22 + 161 + 8 + 16 * 43 + 161);
        let back = ExampleFile::decode(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.encode().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tex2");
        write_examples(&p, &file).unwrap();
        assert_eq!(read_examples(&p).unwrap(), file);
    }

    #[test]
    fn rejects_mismatched_features_and_bad_labels() {
        let cfg = NnConfig { r: 4, k_ll: 8, k_rt: 2, k_imp: 2 };
        let other = NnConfig { r: 4, k_ll: 9, k_rt: 2, k_imp: 2 };
        let mut rng = rng(2);
        let file = ExampleFile { nn: cfg, examples: vec![example(&mut rng, &other, true)] };
        assert!(file.encode().is_err());

        let file = ExampleFile { nn: cfg, examples: vec![example(&mut rng, &cfg, false)] };
        let mut bytes = file.encode().unwrap();
        bytes[22 + 156] = 2;
        assert!(matches!(ExampleFile::decode(&bytes), Err(Error::Format { offset: 178, .. })));
        bytes[..4].copy_from_slice(b"TAV2");
        assert!(matches!(ExampleFile::decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
