//! Latent index grids and the `DXTK` token stream file.
//!
//! Layout (little-endian): magic `DXTK`, version `u16`, codebook size `u32`,
//! patches per frame `u32`, frame count `u32`, then `u16` indices ordered by
//! patch location, then frame, then the 16 grid cells row-major.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Cells per latent grid (4 x 4).
pub const GRID_TOKENS: usize = 16;
pub const GRID_SIDE: usize = 4;

pub const MAGIC: &[u8; 4] = b"DXTK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TokenError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a DXTK token file")]
    BadMagic,
    #[error("unsupported token file version {0}")]
    Version(u16),
    #[error("index {index} outside codebook of size {codebook_size}")]
    IndexOutOfRange { index: usize, codebook_size: usize },
    #[error("grid needs {GRID_TOKENS} indices, got {0}")]
    GridLength(usize),
    #[error("location {location} has {found} frames, expected {expected}")]
    RaggedFrames { location: usize, found: usize, expected: usize },
    #[error("malformed token file: {0}")]
    Malformed(String),
}

/// The 4 x 4 codebook indices of one patch, flattened row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LatentGrid([u16; GRID_TOKENS]);

impl LatentGrid {
    pub fn new(indices: &[usize], codebook_size: usize) -> Result<Self, TokenError> {
        if indices.len() != GRID_TOKENS {
            return Err(TokenError::GridLength(indices.len()));
        }
        let mut grid = [0u16; GRID_TOKENS];
        for (slot, &index) in grid.iter_mut().zip(indices) {
            if index >= codebook_size || index > u16::MAX as usize {
                return Err(TokenError::IndexOutOfRange { index, codebook_size });
            }
            *slot = index as u16;
        }
        Ok(Self(grid))
    }

    pub fn uniform(index: u16) -> Self {
        Self([index; GRID_TOKENS])
    }

    pub fn indices(&self) -> &[u16; GRID_TOKENS] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&i| i as usize)
    }
}

/// Latent grids for every patch location across every frame:
/// `grids[location][frame]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub codebook_size: usize,
    pub grids: Vec<Vec<LatentGrid>>,
}

impl TokenStream {
    pub fn locations(&self) -> usize {
        self.grids.len()
    }

    /// Frame count shared by every location.
    pub fn frames(&self) -> Result<usize, TokenError> {
        let expected = self.grids.first().map_or(0, Vec::len);
        for (location, g) in self.grids.iter().enumerate() {
            if g.len() != expected {
                return Err(TokenError::RaggedFrames { location, found: g.len(), expected });
            }
        }
        Ok(expected)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), TokenError> {
        let frames = self.frames()?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for v in [self.codebook_size, self.grids.len(), frames] {
            let v = u32::try_from(v).map_err(|_| TokenError::Malformed(format!("header value {v}")))?;
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.grids.len() * frames * GRID_TOKENS * 2);
        for grid in self.grids.iter().flatten() {
            for &i in grid.indices() {
                buf.extend_from_slice(&i.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, TokenError> {
        let mut head = [0u8; 18];
        input.read_exact(&mut head).map_err(|_| TokenError::Malformed("truncated header".into()))?;
        if &head[..4] != MAGIC {
            return Err(TokenError::BadMagic);
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(TokenError::Version(version));
        }
        let word = |at: usize| u32::from_le_bytes(head[at..at + 4].try_into().unwrap()) as usize;
        let (codebook_size, locations, frames) = (word(6), word(10), word(14));
        let count = locations
            .checked_mul(frames)
            .and_then(|v| v.checked_mul(GRID_TOKENS * 2))
            .ok_or_else(|| TokenError::Malformed("size overflow".into()))?;
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        if raw.len() != count {
            return Err(TokenError::Malformed(format!("expected {count} index bytes, found {}", raw.len())));
        }
        let indices: Vec<usize> = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
        let mut grids = Vec::with_capacity(locations);
        let mut chunks = indices.chunks_exact(GRID_TOKENS);
        for _ in 0..locations {
            let seq = (0..frames)
                .map(|_| LatentGrid::new(chunks.next().expect("length checked"), codebook_size))
                .collect::<Result<Vec<_>, _>>()?;
            grids.push(seq);
        }
        Ok(Self { codebook_size, grids })
    }
}
