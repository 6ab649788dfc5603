//! Qubit embedding of features in `[0, 1]`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// `x -> cos(x pi/2)|0> + sin(x pi/2)|1>`
pub fn embed_feature(x: f64) -> Result<[f64; 2]> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::FeatureOutOfRange { index: 0, value: x });
    }
    let angle = x * FRAC_PI_2;
    Ok([angle.cos(), angle.sin()])
}

/// Product state of one sample: one unit 2-vector per site.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    vectors: Vec<[f64; 2]>,
}

impl EmbeddedSample {
    /// Wraps already-embedded local vectors. Each must be unit length.
    pub fn from_vectors(vectors: Vec<[f64; 2]>) -> Result<Self> {
        for (i, v) in vectors.iter().enumerate() {
            let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "local vector {i} has norm {norm}"
                )));
            }
        }
        Ok(Self { vectors })
    }

    /// The computational-basis product state for a bit string.
    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            vectors: bits
                .iter()
                .map(|&b| if b == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn site(&self, n: usize) -> [f64; 2] {
        self.vectors[n]
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }
}

pub fn embed_sample(row: &[f64]) -> Result<EmbeddedSample> {
    let vectors = row
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            embed_feature(x).map_err(|_| Error::FeatureOutOfRange { index, value: x })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedSample { vectors })
}
