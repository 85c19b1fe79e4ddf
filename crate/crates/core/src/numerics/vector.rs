use std::ops::{Index, Range};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

macro_rules! flat_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn iter(&self) -> std::slice::Iter<'_, f64> {
                self.0.iter()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
            pub fn bit_eq(&self, other: &Self) -> bool {
                self.len() == other.len()
                    && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
            }

            pub fn segment(&self, range: Range<usize>) -> &[f64] {
                &self.0[range]
            }
        }

        impl Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }

        impl AsRef<[f64]> for $name {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

flat_vector!(
    /// Flat vector holding every model parameter, including non-trainable
    /// batch-norm running statistics.
    ParamVector
);

flat_vector!(
    /// Gradient of a scalar objective with respect to a [`ParamVector`].
    GradientVector
);

impl ParamVector {
    /// `other - self`, the displacement from `self` to `other`.
    pub fn delta_to(&self, other: &ParamVector) -> Result<GradientVector> {
        check_len(self.len(), other.len())?;
        Ok(GradientVector(
            other.0.iter().zip(&self.0).map(|(b, a)| b - a).collect(),
        ))
    }

    /// `self + beta * (toward - self)`.
    pub fn interpolate(&self, toward: &ParamVector, beta: f64) -> Result<ParamVector> {
        check_len(self.len(), toward.len())?;
        let out: Vec<f64> = self
            .0
            .iter()
            .zip(&toward.0)
            .map(|(a, b)| a + beta * (b - a))
            .collect();
        finite(ParamVector(out), "interpolate")
    }

    /// Overwrites `range` with the same range taken from `src`.
    pub fn copy_segment_from(&mut self, src: &ParamVector, range: Range<usize>) {
        self.0[range.clone()].copy_from_slice(&src.0[range]);
    }
}

impl GradientVector {
    pub fn scaled(&self, factor: f64) -> GradientVector {
        GradientVector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn add_scaled(&mut self, factor: f64, other: &GradientVector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Zeroes every coordinate whose mask entry is `false`.
    pub fn masked(&self, keep: &[bool]) -> GradientVector {
        GradientVector(
            self.0
                .iter()
                .zip(keep)
                .map(|(v, &k)| if k { *v } else { 0.0 })
                .collect(),
        )
    }

    pub fn mean(vs: &[GradientVector]) -> Result<GradientVector> {
        let slices: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        mean_slices(&slices).map(GradientVector)
    }
}

fn finite<T: AsRef<[f64]>>(v: T, what: &'static str) -> Result<T> {
    if v.as_ref().iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Inner product `Σ a_i b_i`.
pub fn dot(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    dot_slices(a.as_slice(), b.as_slice())
}

pub fn dot_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// `y + alpha * x`.
pub fn axpy(y: &ParamVector, alpha: f64, x: &GradientVector) -> Result<ParamVector> {
    check_len(y.len(), x.len())?;
    let out: Vec<f64> = y.0.iter().zip(&x.0).map(|(a, b)| a + alpha * b).collect();
    finite(ParamVector(out), "axpy")
}

/// Elementwise arithmetic mean.
pub fn mean_vectors(vs: &[ParamVector]) -> Result<ParamVector> {
    let slices: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
    mean_slices(&slices).map(ParamVector)
}

/// Computed as `v0 + Σ (v_i - v0) / k`, so that averaging identical inputs is exact.
pub(crate) fn mean_slices(vs: &[&[f64]]) -> Result<Vec<f64>> {
    let first = *vs
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty list of vectors"))?;
    for v in &vs[1..] {
        check_len(first.len(), v.len())?;
    }
    let k = vs.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for v in &vs[1..] {
        for ((a, x), x0) in acc.iter_mut().zip(v.iter()).zip(first) {
            *a += x - x0;
        }
    }
    let out: Vec<f64> = first.iter().zip(&acc).map(|(x0, a)| x0 + a / k).collect();
    finite(out, "mean_vectors")
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let ab = dot_slices(a, b)?;
    let na = dot_slices(a, a)?.sqrt();
    let nb = dot_slices(b, b)?.sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(ab / (na * nb))
}
