use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("feature file truncated: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature file has {0} trailing bytes")]
    Trailing(usize),
    #[error("feature file contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major `rows × cols` matrix of 32-bit features.
///
/// On disk: `rows: u32`, `cols: u32`, then `rows * cols` little-endian `f32`.
/// Per-recording embeddings store one row per frame; dataset exports store
/// one `T × D` matrix per window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "feature buffer does not match shape");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureFileError> {
        if bytes.len() < 8 {
            return Err(FeatureFileError::Truncated {
                expected: 8,
                found: bytes.len(),
            });
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .unwrap_or(usize::MAX);
        if payload.len() < expected {
            return Err(FeatureFileError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(FeatureFileError::Trailing(payload.len() - expected));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureFileError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, FeatureFileError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
