//! On-disk formats and the synthetic data generator.
//!
//! All integers are little-endian and records are packed without padding.
//!
//! Sequence store (`.tav2`):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TAV2"
//! 4       2     version (1)
//! 6       8     record count
//! 14      ...   records
//!
//! record:
//! 0       8     user_id
//! 8       2     lifelong length
//! 10      2     real-time length
//! 12      2     impression length
//! 14      39*n  tokens: lifelong, then real-time, then impression
//!
//! token (39 bytes):
//! 0       4     timestamp (seconds)
//! 4       2     action bitmask
//! 6       1     surface id
//! 7       32    embedding codes (i8)
//! ```
//!
//! The packed token block used by the `/users` endpoint is a record without
//! its `user_id`: the three u16 lengths followed by the tokens.

mod examples;
pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seqcore::{ActionToken, ActionType, QuantizedEmbedding, SequenceCaps, UserSequences, EMBED_DIM};

pub use examples::{read_examples, write_examples, ExampleFile, Labels, TrainingExample, EXAMPLE_HEADER_BYTES};
pub use synthetic::{generate_synthetic, CandidateKind, SyntheticConfig, SyntheticData, TokenCounts};

pub const STORE_MAGIC: &[u8; 4] = b"TAV2";
pub const STORE_VERSION: u16 = 1;
pub const STORE_HEADER_BYTES: usize = 14;
pub const RECORD_HEADER_BYTES: usize = 14;
pub const TOKEN_BYTES: usize = 4 + 2 + 1 + EMBED_DIM;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: u64,
    pub sequences: UserSequences,
}

/// Contents of a `.tav2` file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceStore {
    pub records: Vec<UserRecord>,
}

pub(crate) fn write_token(out: &mut Vec<u8>, t: &ActionToken) {
    out.extend_from_slice(&t.timestamp.to_le_bytes());
    out.extend_from_slice(&t.action.bits().to_le_bytes());
    out.push(t.surface);
    out.extend(t.embedding.codes().iter().map(|&q| q as u8));
}

pub(crate) fn read_token(r: &mut ByteReader<'_>) -> Result<ActionToken> {
    let at = r.offset();
    let timestamp = r.u32()?;
    let bits = r.u16()?;
    let surface = r.u8()?;
    let raw = r.bytes(EMBED_DIM)?;
    let mut codes = [0i8; EMBED_DIM];
    for (c, &b) in codes.iter_mut().zip(raw) {
        *c = b as i8;
    }
    let action = ActionType::new(bits).map_err(|e| Error::format(at + 4, e.to_string()))?;
    let embedding = QuantizedEmbedding::new(codes).map_err(|e| Error::format(at + 7, e.to_string()))?;
    ActionToken::new(timestamp, action, surface, embedding).map_err(|e| Error::format(at, e.to_string()))
}

/// Cursor over a byte slice that reports the absolute offset of any failure.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0, base: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

fn lists_caps() -> SequenceCaps {
    let max = u16::MAX as usize;
    SequenceCaps {
        lifelong: max,
        realtime: max,
        impression: max,
    }
}

fn write_lists(out: &mut Vec<u8>, seqs: &UserSequences) -> Result<()> {
    for list in [&seqs.lifelong, &seqs.realtime, &seqs.impression] {
        let len = u16::try_from(list.len()).map_err(|_| Error::validation(format!("list of {} tokens exceeds u16", list.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
    }
    for t in seqs.lifelong.iter().chain(&seqs.realtime).chain(&seqs.impression) {
        write_token(out, t);
    }
    Ok(())
}

fn read_lists(r: &mut ByteReader<'_>) -> Result<UserSequences> {
    let start = r.offset();
    let lens = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
    let need = lens.iter().sum::<usize>() * TOKEN_BYTES;
    if r.remaining() < need {
        return Err(Error::format(
            r.offset(),
            format!("declared lengths {lens:?} need {need} bytes, {} left", r.remaining()),
        ));
    }
    let mut lists = lens.map(Vec::with_capacity);
    for (list, n) in lists.iter_mut().zip(lens) {
        for _ in 0..n {
            list.push(read_token(r)?);
        }
    }
    let [lifelong, realtime, impression] = lists;
    let seqs = UserSequences {
        lifelong,
        realtime,
        impression,
    };
    seqs.validate(&lists_caps()).map_err(|e| Error::format(start, e.to_string()))?;
    Ok(seqs)
}

/// Packed token block (three u16 lengths + tokens) for one user.
pub fn encode_token_block(seqs: &UserSequences) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + seqs.total_tokens() * TOKEN_BYTES);
    write_lists(&mut out, seqs)?;
    Ok(out)
}

pub fn decode_token_block(bytes: &[u8]) -> Result<UserSequences> {
    let mut r = ByteReader::new(bytes);
    let seqs = read_lists(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(seqs)
}

impl SequenceStore {
    /// Lookup table from user id to sequences.
    pub fn index(&self) -> HashMap<u64, &UserSequences> {
        self.records.iter().map(|r| (r.user_id, &r.sequences)).collect()
    }

    pub fn encoded_len(&self) -> usize {
        STORE_HEADER_BYTES
            + self
                .records
                .iter()
                .map(|r| RECORD_HEADER_BYTES + r.sequences.total_tokens() * TOKEN_BYTES)
                .sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&rec.user_id.to_le_bytes());
            write_lists(&mut out, &rec.sequences)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.bytes(4)? != STORE_MAGIC {
            return Err(Error::format(0, "bad magic, expected TAV2"));
        }
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        // Every record needs at least its header.
        if count > (r.remaining() / RECORD_HEADER_BYTES) as u64 {
            return Err(Error::format(6, format!("record count {count} exceeds file size")));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let user_id = r.u64()?;
            records.push(UserRecord {
                user_id,
                sequences: read_lists(&mut r)?,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), format!("{} bytes after last record", r.remaining())));
        }
        Ok(SequenceStore { records })
    }
}

pub fn write_store(path: impl AsRef<Path>, store: &SequenceStore) -> Result<()> {
    std::fs::write(path, store.encode()?)?;
    Ok(())
}

pub fn read_store(path: impl AsRef<Path>) -> Result<SequenceStore> {
    SequenceStore::decode(&std::fs::read(path)?)
}
