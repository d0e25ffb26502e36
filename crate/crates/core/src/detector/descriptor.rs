use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FILTER_CHOICES: [usize; 4] = [16, 32, 64, 128];
pub const KERNEL_CHOICES: [usize; 2] = [3, 5];
pub const DENSE_CHOICES: [usize; 4] = [32, 64, 128, 256];
pub const MAX_BLOCKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDescriptor {
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub dropout: f64,
    pub dense_units: usize,
    /// (channels, H, W); channels is always 2.
    pub input_shape: (usize, usize, usize),
    pub normalization: NormKind,
}

impl ArchitectureDescriptor {
    /// One 16-filter 3x3 block with pooling, 32 dense units, batch norm.
    pub fn minimal(h: usize, w: usize) -> Self {
        Self {
            conv_blocks: vec![ConvBlockSpec { filters: 16, kernel: 3, pool: true }],
            dropout: 0.0,
            dense_units: 32,
            input_shape: (2, h, w),
            normalization: NormKind::Batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDescriptor(m));
        let n = self.conv_blocks.len();
        if !(1..=MAX_BLOCKS).contains(&n) {
            return bad(format!("{n} conv blocks, expected 1..={MAX_BLOCKS}"));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if !FILTER_CHOICES.contains(&b.filters) {
                return bad(format!("block {i}: filters {} not in {FILTER_CHOICES:?}", b.filters));
            }
            if !KERNEL_CHOICES.contains(&b.kernel) {
                return bad(format!("block {i}: kernel {} not in {KERNEL_CHOICES:?}", b.kernel));
            }
        }
        if !DENSE_CHOICES.contains(&self.dense_units) {
            return bad(format!("dense_units {} not in {DENSE_CHOICES:?}", self.dense_units));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let (c, h, w) = self.input_shape;
        if c != 2 || h == 0 || w == 0 {
            return bad(format!("input shape {:?}, expected (2, H, W)", self.input_shape));
        }
        Ok(())
    }

    /// Spatial size entering each block and after the last one.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let (_, mut h, mut w) = self.input_shape;
        let mut out = vec![(h, w)];
        for b in &self.conv_blocks {
            if b.pool {
                h = pooled(h);
                w = pooled(w);
            }
            out.push((h, w));
        }
        out
    }

    /// Multiply-accumulates of one forward pass on one sample.
    pub fn forward_macs(&self) -> u64 {
        let sizes = self.spatial_sizes();
        let mut c_in = self.input_shape.0;
        let mut total = 0u64;
        for (b, &(h, w)) in self.conv_blocks.iter().zip(&sizes) {
            total += (h * w * b.filters * c_in * b.kernel * b.kernel) as u64;
            c_in = b.filters;
        }
        total + (c_in * self.dense_units + self.dense_units) as u64
    }
}

impl fmt::Display for ArchitectureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.conv_blocks {
            write!(f, "c{}k{}{} ", b.filters, b.kernel, if b.pool { "p" } else { "" })?;
        }
        write!(
            f,
            "d{} drop{} {}",
            self.dense_units,
            self.dropout,
            match self.normalization {
                NormKind::Batch => "bn",
                NormKind::None => "nonorm",
            }
        )
    }
}

/// 2x2 max-pool output length; axes shorter than 2 are left alone.
pub(crate) fn pooled(n: usize) -> usize {
    if n < 2 {
        n
    } else {
        n / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_count_bounds() {
        let mut d = ArchitectureDescriptor::minimal(64, 64);
        assert!(d.validate().is_ok());
        d.conv_blocks = vec![d.conv_blocks[0]; 6];
        assert!(matches!(d.validate(), Err(Error::InvalidDescriptor(_))));
        d.conv_blocks.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn field_choices_enforced() {
        let base = ArchitectureDescriptor::minimal(32, 32);
        let mut d = base.clone();
        d.conv_blocks[0].kernel = 7;
        assert!(d.validate().is_err());
        let mut d = base.clone();
        d.dense_units = 100;
        assert!(d.validate().is_err());
        let mut d = base;
        d.dropout = 1.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn sizes_through_pooling() {
        let mut d = ArchitectureDescriptor::minimal(9, 4);
        d.conv_blocks = vec![ConvBlockSpec { filters: 16, kernel: 3, pool: true }; 4];
        assert_eq!(d.spatial_sizes(), vec![(9, 4), (4, 2), (2, 1), (1, 1), (1, 1)]);
    }
}
