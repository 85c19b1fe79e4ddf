use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Hidden layer whose pre-activation is batch-normalized.
    pub bn_after_layer: usize,
}

impl MlpArchitecture {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        bn_after_layer: usize,
    ) -> Result<Self> {
        let arch = MlpArchitecture {
            input_dim,
            hidden_dims,
            num_classes,
            bn_after_layer,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("input_dim and num_classes must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "need at least one hidden layer and all widths >= 1".into(),
            ));
        }
        if self.bn_after_layer >= self.hidden_dims.len() {
            return Err(Error::Config(format!(
                "bn_after_layer {} out of range for {} hidden layers",
                self.bn_after_layer,
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// `[input, hidden..., classes]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl SegmentKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, SegmentKind::BnRunningMean | SegmentKind::BnRunningVar)
    }

    pub fn is_batch_norm(self) -> bool {
        !matches!(self, SegmentKind::Weight | SegmentKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Index of the linear layer the segment belongs to (the output layer is last).
    pub layer: usize,
    pub range: Range<usize>,
}

/// Where each parameter group lives inside the flat vector.
///
/// Per hidden layer: weight (`out × in`, row-major), bias, and for the
/// normalized layer the scale, shift, running mean and running variance.
/// The output layer's weight and bias come last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    pub fn for_architecture(arch: &MlpArchitecture) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |kind, layer, n: usize, offset: &mut usize| {
            segments.push(Segment {
                kind,
                layer,
                range: *offset..*offset + n,
            });
            *offset += n;
        };
        for layer in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
            push(SegmentKind::Weight, layer, fan_in * fan_out, &mut offset);
            push(SegmentKind::Bias, layer, fan_out, &mut offset);
            if layer == arch.bn_after_layer {
                for kind in [
                    SegmentKind::BnScale,
                    SegmentKind::BnShift,
                    SegmentKind::BnRunningMean,
                    SegmentKind::BnRunningVar,
                ] {
                    push(kind, layer, fan_out, &mut offset);
                }
            }
        }
        Ok(ParamLayout {
            segments,
            len: offset,
        })
    }

    /// Layout made of plain weight/bias segments for a single linear map.
    pub(crate) fn linear(input_dim: usize, outputs: usize) -> Self {
        ParamLayout {
            segments: vec![
                Segment {
                    kind: SegmentKind::Weight,
                    layer: 0,
                    range: 0..input_dim * outputs,
                },
                Segment {
                    kind: SegmentKind::Bias,
                    layer: 0,
                    range: input_dim * outputs..(input_dim + 1) * outputs,
                },
            ],
            len: (input_dim + 1) * outputs,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn find(&self, kind: SegmentKind, layer: usize) -> Option<Range<usize>> {
        self.segments
            .iter()
            .find(|s| s.kind == kind && s.layer == layer)
            .map(|s| s.range.clone())
    }

    fn ranges_where(&self, pred: impl Fn(SegmentKind) -> bool) -> Vec<Range<usize>> {
        self.segments
            .iter()
            .filter(|s| pred(s.kind))
            .map(|s| s.range.clone())
            .collect()
    }

    /// Every batch-norm segment: affine parameters and running statistics.
    pub fn bn_ranges(&self) -> Vec<Range<usize>> {
        self.ranges_where(SegmentKind::is_batch_norm)
    }

    pub fn bn_affine_ranges(&self) -> Vec<Range<usize>> {
        self.ranges_where(|k| matches!(k, SegmentKind::BnScale | SegmentKind::BnShift))
    }

    pub fn running_stat_ranges(&self) -> Vec<Range<usize>> {
        self.ranges_where(|k| !k.is_trainable())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.segments.iter().any(|s| s.kind.is_batch_norm())
    }

    fn mask_where(&self, pred: impl Fn(SegmentKind) -> bool) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for s in &self.segments {
            if pred(s.kind) {
                mask[s.range.clone()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.mask_where(SegmentKind::is_trainable)
    }

    pub fn bn_mask(&self) -> Vec<bool> {
        self.mask_where(SegmentKind::is_batch_norm)
    }

    pub fn bn_affine_mask(&self) -> Vec<bool> {
        self.mask_where(|k| matches!(k, SegmentKind::BnScale | SegmentKind::BnShift))
    }

    /// Concatenated values of all batch-norm segments.
    pub fn extract_bn(&self, params: &[f64]) -> Vec<f64> {
        self.bn_ranges()
            .into_iter()
            .flat_map(|r| params[r].iter().copied())
            .collect()
    }

    /// Inverse of [`ParamLayout::extract_bn`].
    pub fn insert_bn(&self, params: &mut [f64], bn: &[f64]) -> Result<()> {
        let ranges = self.bn_ranges();
        let total: usize = ranges.iter().map(|r| r.len()).sum();
        crate::error::check_len(total, bn.len())?;
        let mut off = 0;
        for r in ranges {
            let n = r.len();
            params[r].copy_from_slice(&bn[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_partition_the_vector() {
        let arch = MlpArchitecture::new(2, vec![8, 4], 2, 0).unwrap();
        let layout = ParamLayout::for_architecture(&arch).unwrap();
        let mut covered = vec![0u8; layout.len()];
        for s in layout.segments() {
            for i in s.range.clone() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        // 2*8+8 + 4*8 + 16*8... spelled out: W0 16, b0 8, bn 32, W1 32, b1 4, W2 8, b2 2
        assert_eq!(layout.len(), 16 + 8 + 32 + 32 + 4 + 8 + 2);
        assert_eq!(layout.running_stat_ranges().len(), 2);
        assert_eq!(layout.trainable_mask().iter().filter(|m| !**m).count(), 16);
    }

    #[test]
    fn invalid_architectures() {
        assert!(MlpArchitecture::new(0, vec![4], 2, 0).is_err());
        assert!(MlpArchitecture::new(3, vec![], 2, 0).is_err());
        assert!(MlpArchitecture::new(3, vec![4, 0], 2, 0).is_err());
        assert!(MlpArchitecture::new(3, vec![4], 2, 1).is_err());
    }

    #[test]
    fn bn_extract_insert_roundtrip() {
        let arch = MlpArchitecture::new(3, vec![5, 4], 3, 1).unwrap();
        let layout = ParamLayout::for_architecture(&arch).unwrap();
        let params: Vec<f64> = (0..layout.len()).map(|i| i as f64).collect();
        let bn = layout.extract_bn(&params);
        assert_eq!(bn.len(), 16);
        let mut other = vec![0.0; layout.len()];
        layout.insert_bn(&mut other, &bn).unwrap();
        for (i, m) in layout.bn_mask().iter().enumerate() {
            assert_eq!(other[i], if *m { params[i] } else { 0.0 });
        }
    }
}
