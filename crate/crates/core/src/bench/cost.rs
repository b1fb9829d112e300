use super::ModelKind;
use crate::blosa::select_block_length;
use crate::error::Result;

/// Score-tensor element counts for one attention direction.
///
/// `w` is the per-pair score width: `d_e` for feature-level scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub n: usize,
    pub r: usize,
    pub m: usize,
    pub w: usize,
    pub intra_elems: usize,
    pub inter_elems: usize,
    pub full_san_elems: usize,
}

impl CostModel {
    pub fn blocked_elems(&self) -> usize {
        self.intra_elems + self.inter_elems
    }

    /// Count for the given model kind.
    pub fn elems(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::BiBlosa => self.blocked_elems(),
            ModelKind::FullSan => self.full_san_elems,
        }
    }

    /// Cost model with `r` chosen automatically.
    pub fn auto(n: usize, d_e: usize) -> Result<Self> {
        Ok(count_score_elements(n, select_block_length(n)?, d_e))
    }
}

/// Intra-block `m r^2 w`, inter-block `m^2 w` and full-sequence `n^2 w`
/// score elements, with `m = ceil(n / r)`.
pub fn count_score_elements(n: usize, r: usize, w: usize) -> CostModel {
    let m = n.div_ceil(r.max(1));
    CostModel {
        n,
        r,
        m,
        w,
        intra_elems: m * r * r * w,
        inter_elems: m * m * w,
        full_san_elems: n * n * w,
    }
}
