//! n-of-n XOR sharing. Any n-1 chunks are uniformly random and independent
//! of the data; all n XOR back to it.

use rand::RngCore;
use thiserror::Error;

pub const MIN_CHUNKS: usize = 2;
pub const MAX_CHUNKS: usize = 16;
pub const DEFAULT_CHUNKS: usize = 3;
/// Default cap on private data length (1 MiB).
pub const DEFAULT_MAX_DATA_LEN: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("chunk count {0} outside {MIN_CHUNKS}..={MAX_CHUNKS}")]
    BadChunkCount(usize),
    #[error("private data is empty")]
    EmptyData,
    #[error("private data of {len} bytes exceeds cap of {cap}")]
    TooLarge { len: usize, cap: usize },
    #[error("incomplete chunk set: expected indices 1..={total}, got {got:?}")]
    IncompleteSet { total: usize, got: Vec<usize> },
    #[error("chunk lengths disagree")]
    LengthMismatch,
}

#[derive(Clone, PartialEq, Eq)]
pub struct PrivateData(Vec<u8>);

impl PrivateData {
    pub fn new(bytes: Vec<u8>) -> Result<Self, SplitError> {
        Self::with_cap(bytes, DEFAULT_MAX_DATA_LEN)
    }

    pub fn with_cap(bytes: Vec<u8>, cap: usize) -> Result<Self, SplitError> {
        if bytes.is_empty() {
            return Err(SplitError::EmptyData);
        }
        if bytes.len() > cap {
            return Err(SplitError::TooLarge { len: bytes.len(), cap });
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

// Never print private data.
impl std::fmt::Debug for PrivateData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PrivateData({} bytes)", self.0.len())
    }
}

/// One share of a split. `index` is 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub bytes: Vec<u8>,
    pub index: usize,
    pub total: usize,
}

pub fn split<R: RngCore + ?Sized>(
    pd: &PrivateData,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Chunk>, SplitError> {
    if !(MIN_CHUNKS..=MAX_CHUNKS).contains(&n) {
        return Err(SplitError::BadChunkCount(n));
    }
    let mut last = pd.as_bytes().to_vec();
    let mut chunks = Vec::with_capacity(n);
    for index in 1..n {
        let mut bytes = vec![0u8; last.len()];
        rng.fill_bytes(&mut bytes);
        xor_into(&mut last, &bytes);
        chunks.push(Chunk { bytes, index, total: n });
    }
    chunks.push(Chunk { bytes: last, index: n, total: n });
    Ok(chunks)
}

pub fn recombine(chunks: &[Chunk]) -> Result<PrivateData, SplitError> {
    let first = chunks.first().ok_or(SplitError::IncompleteSet { total: 0, got: vec![] })?;
    let total = first.total;
    let mut indices: Vec<usize> = chunks.iter().map(|c| c.index).collect();
    indices.sort_unstable();
    let complete = chunks.iter().all(|c| c.total == total)
        && indices.iter().copied().eq(1..=total);
    if !complete {
        return Err(SplitError::IncompleteSet { total, got: indices });
    }
    let len = first.bytes.len();
    if chunks.iter().any(|c| c.bytes.len() != len) {
        return Err(SplitError::LengthMismatch);
    }
    let mut out = vec![0u8; len];
    for c in chunks {
        xor_into(&mut out, &c.bytes);
    }
    PrivateData::with_cap(out, usize::MAX)
}

fn xor_into(acc: &mut [u8], other: &[u8]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a ^= b;
    }
}
