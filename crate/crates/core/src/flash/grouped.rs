use super::config::TileConfig;
use super::forward::{flash_fwd, ForwardOutput, Schedule};
use crate::dense::Matrix;
use crate::error::{mismatch, Result};
use crate::reference::{AttentionInputs, HeadMap};

/// Forward over all query heads, each reading the kv head `map` assigns it.
/// K and V are borrowed per kv head, never copied per query head.
#[allow(clippy::too_many_arguments)]
pub fn flash_fwd_grouped(
    q: &[Matrix],
    k: &[Matrix],
    v: &[Matrix],
    map: &HeadMap,
    alpha: f64,
    causal: bool,
    cfg: &TileConfig,
    schedule: Schedule,
) -> Result<Vec<ForwardOutput>> {
    if q.len() != map.heads() || k.len() != map.kv_heads() || v.len() != map.kv_heads() {
        return Err(mismatch(
            "flash_fwd_grouped",
            format!(
                "{} Q, {} K, {} V matrices for {} heads over {} kv heads",
                q.len(),
                k.len(),
                v.len(),
                map.heads(),
                map.kv_heads()
            ),
        ));
    }
    map.iter()
        .map(|(h, kv)| {
            let inputs = AttentionInputs::new(&q[h], &k[kv], &v[kv])?
                .with_alpha(alpha)
                .with_causal(causal);
            flash_fwd(&inputs, cfg, schedule)
        })
        .collect()
}
