//! Closed-form multiply-accumulate counts for global, windowed and
//! complementary window attention.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    /// Token-grid extents.
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub m: u64,
}

impl CostModel {
    pub fn new(h: u64, w: u64, c: u64, m: u64) -> Self {
        CostModel { h, w, c, m }
    }

    /// Global attention: `4hwC² + 2(hw)²C`.
    pub fn msa(&self) -> f64 {
        let (hw, c) = ((self.h * self.w) as f64, self.c as f64);
        4.0 * hw * c * c + 2.0 * hw * hw * c
    }

    /// Shifted-window attention: `4hwC² + 2M²hwC`.
    pub fn swmsa(&self) -> f64 {
        let (hw, c, m) = ((self.h * self.w) as f64, self.c as f64, self.m as f64);
        4.0 * hw * c * c + 2.0 * m * m * hw * c
    }

    /// Complementary window attention: `hwC²/4 + M²hwC`.
    pub fn acam(&self) -> f64 {
        let (hw, c, m) = ((self.h * self.w) as f64, self.c as f64, self.m as f64);
        hw * c * c / 4.0 + m * m * hw * c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_triple() {
        let m = CostModel::new(8, 8, 16, 4);
        assert_eq!(m.msa(), 196608.0);
        assert_eq!(m.swmsa(), 98304.0);
        assert_eq!(m.acam(), 20480.0);
    }

    #[test]
    fn full_window_equals_global() {
        let m = CostModel::new(4, 4, 32, 4);
        assert_eq!(m.msa(), m.swmsa());
    }

    #[test]
    fn ordering() {
        for h in 1..12 {
            for c in [1, 8, 96] {
                for w in [1, 4] {
                    let m = CostModel::new(h, w, c, 4);
                    assert!(m.acam() < m.swmsa());
                }
            }
        }
    }
}
