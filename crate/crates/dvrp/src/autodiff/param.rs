//! Flat parameter vector with a named block table.

use crate::error::{DvrpError, Result};

/// One named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// All trainable parameters as one flat `f64` array plus a block table.
/// Blocks are contiguous, non-overlapping, and cover the whole vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

impl ParamVector {
    /// Build from `(name, values)` pairs laid out in order.
    pub fn from_blocks(blocks: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut values = Vec::new();
        let mut table = Vec::with_capacity(blocks.len());
        for (name, vals) in blocks {
            if table.iter().any(|b: &ParamBlock| b.name == name) {
                return Err(DvrpError::Config(format!("duplicate block name {name}")));
            }
            let offset = values.len();
            let len = vals.len();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(DvrpError::Config(format!("non-finite value in block {name}")));
            }
            values.extend_from_slice(&vals);
            table.push(ParamBlock { name, offset, len });
        }
        Ok(Self { values, blocks: table })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Slice of the values belonging to a named block.
    pub fn block_values(&self, name: &str) -> Option<&[f64]> {
        self.block(name).map(|b| &self.values[b.offset..b.offset + b.len])
    }

    /// Replace all values, keeping the block table. Lengths must match.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(DvrpError::LengthMismatch { left: values.len(), right: self.values.len() });
        }
        Ok(Self { values, blocks: self.blocks.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
