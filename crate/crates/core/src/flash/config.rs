use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Tile shape of the blocked kernels. Causal masking and the softmax scale
/// travel with the inputs; the tile only fixes how work is cut up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    /// Query rows per block, `B_r`.
    pub block_rows: usize,
    /// Key/value rows per block, `B_c`.
    pub block_cols: usize,
    /// Circular-buffer stages `s` (consumed by the pipeline simulator).
    pub stages: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            block_rows: 128,
            block_cols: 128,
            stages: 2,
        }
    }
}

impl TileConfig {
    pub fn new(block_rows: usize, block_cols: usize) -> Result<Self> {
        let cfg = TileConfig {
            block_rows,
            block_cols,
            ..TileConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_stages(mut self, stages: usize) -> Result<Self> {
        self.stages = stages;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 {
            return Err(invalid("block_rows", "must be at least 1"));
        }
        if self.block_cols == 0 {
            return Err(invalid("block_cols", "must be at least 1"));
        }
        if self.stages == 0 {
            return Err(invalid("stages", "must be at least 1"));
        }
        Ok(())
    }

    /// `T_r = ⌈M / B_r⌉`.
    pub fn row_blocks(&self, query_len: usize) -> usize {
        query_len.div_ceil(self.block_rows)
    }

    /// `T_c = ⌈N / B_c⌉`.
    pub fn col_blocks(&self, kv_len: usize) -> usize {
        kv_len.div_ceil(self.block_cols)
    }

    pub(crate) fn row_range(&self, i: usize, len: usize) -> (usize, usize) {
        (i * self.block_rows, ((i + 1) * self.block_rows).min(len))
    }

    pub(crate) fn col_range(&self, j: usize, len: usize) -> (usize, usize) {
        (j * self.block_cols, ((j + 1) * self.block_cols).min(len))
    }

    /// Whether every entry of tile `(i, j)` is hidden by the causal mask.
    pub(crate) fn fully_masked(&self, causal: bool, i: usize, j: usize, query_len: usize) -> bool {
        let (_, r1) = self.row_range(i, query_len);
        causal && j * self.block_cols > r1 - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_counts_round_up() {
        let c = TileConfig::new(32, 48).unwrap();
        assert_eq!(c.row_blocks(100), 4);
        assert_eq!(c.col_blocks(100), 3);
        assert_eq!(c.col_range(2, 100), (96, 100));
        assert!(TileConfig::new(0, 4).is_err());
        assert!(c.with_stages(0).is_err());
    }

    #[test]
    fn causal_skip_rule() {
        let c = TileConfig::new(16, 16).unwrap();
        assert!(!c.fully_masked(true, 0, 0, 64));
        assert!(c.fully_masked(true, 0, 1, 64));
        assert!(!c.fully_masked(false, 0, 3, 64));
        assert!(!c.fully_masked(true, 3, 3, 64));
    }
}
