use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{MoirError, Result};

/// Which side of a routed pair a token sequence belongs to.
///
/// `A` plays the role of the perceptual modality (image/video) and `B` the
/// textual one; the text side is the reference modality for the dominance
/// index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::A => f.write_str("A"),
            Modality::B => f.write_str("B"),
        }
    }
}

/// A batch of token embeddings, `batch x tokens x dims`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    batch: usize,
    tokens: usize,
    dims: usize,
    values: Vec<f64>,
    modality: Modality,
}

impl TokenSequence {
    pub fn new(
        batch: usize,
        tokens: usize,
        dims: usize,
        values: Vec<f64>,
        modality: Modality,
    ) -> Result<Self> {
        if batch == 0 || tokens == 0 || dims == 0 {
            return Err(MoirError::input(format!(
                "token sequence dimensions must be positive, got {batch}x{tokens}x{dims}"
            )));
        }
        if values.len() != batch * tokens * dims {
            return Err(MoirError::input(format!(
                "token sequence {batch}x{tokens}x{dims} needs {} values, got {}",
                batch * tokens * dims,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MoirError::input("token sequence contains non-finite values"));
        }
        Ok(Self {
            batch,
            tokens,
            dims,
            values,
            modality,
        })
    }

    pub fn zeros(batch: usize, tokens: usize, dims: usize, modality: Modality) -> Self {
        assert!(batch > 0 && tokens > 0 && dims > 0);
        Self {
            batch,
            tokens,
            dims,
            values: vec![0.0; batch * tokens * dims],
            modality,
        }
    }

    /// Stacks single-instance sequences along the batch axis.
    pub fn stack(parts: &[&TokenSequence]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| MoirError::input("cannot stack an empty list"))?;
        let (tokens, dims, modality) = (first.tokens, first.dims, first.modality);
        let mut values = Vec::with_capacity(parts.len() * first.values.len());
        let mut batch = 0;
        for p in parts {
            if p.tokens != tokens || p.dims != dims {
                return Err(MoirError::input(format!(
                    "cannot stack {}x{} tokens with {}x{}",
                    p.tokens, p.dims, tokens, dims
                )));
            }
            batch += p.batch;
            values.extend_from_slice(&p.values);
        }
        Ok(Self {
            batch,
            tokens,
            dims,
            values,
            modality,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.tokens, self.dims)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, b: usize, l: usize, d: usize) -> usize {
        (b * self.tokens + l) * self.dims + d
    }

    #[inline]
    pub fn get(&self, b: usize, l: usize, d: usize) -> f64 {
        self.values[self.index(b, l, d)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, l: usize, d: usize, v: f64) {
        let i = self.index(b, l, d);
        self.values[i] = v;
    }

    /// The `D` values of token `(b, l)`.
    pub fn token(&self, b: usize, l: usize) -> &[f64] {
        let start = self.index(b, l, 0);
        &self.values[start..start + self.dims]
    }

    /// The `L x D` block of batch entry `b`.
    pub fn instance(&self, b: usize) -> &[f64] {
        let len = self.tokens * self.dims;
        &self.values[b * len..(b + 1) * len]
    }

    /// Batch entry `b` as its own single-instance sequence.
    pub fn slice_instance(&self, b: usize) -> TokenSequence {
        TokenSequence {
            batch: 1,
            tokens: self.tokens,
            dims: self.dims,
            values: self.instance(b).to_vec(),
            modality: self.modality,
        }
    }

    pub fn scaled(&self, c: f64) -> TokenSequence {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }
}
