use crate::dense::Matrix;
use crate::error::{mismatch, Error, Result};

/// Maps each query head to the kv head it reads. Pure index arithmetic:
/// grouped heads share one K/V matrix rather than copies of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadMap {
    heads: usize,
    kv_heads: usize,
}

impl HeadMap {
    pub fn new(heads: usize, kv_heads: usize) -> Result<Self> {
        if heads == 0 || kv_heads == 0 || heads % kv_heads != 0 {
            return Err(Error::HeadGrouping { heads, kv_heads });
        }
        Ok(HeadMap { heads, kv_heads })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    #[inline]
    pub fn kv_head(&self, head: usize) -> usize {
        debug_assert!(head < self.heads);
        head / self.group_size()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.heads).map(|h| (h, self.kv_head(h)))
    }
}

/// Builds the query-head to kv-head map for `heads` query heads over the
/// given per-kv-head K and V matrices.
pub fn gqa_expand(k: &[Matrix], v: &[Matrix], heads: usize, kv_heads: usize) -> Result<HeadMap> {
    if k.len() != kv_heads || v.len() != kv_heads {
        return Err(mismatch(
            "gqa_expand",
            format!(
                "{kv_heads} kv heads but {} K and {} V matrices",
                k.len(),
                v.len()
            ),
        ));
    }
    HeadMap::new(heads, kv_heads)
}
