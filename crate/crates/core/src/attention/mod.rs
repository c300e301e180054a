//! Window attention: partitioning, the complementary four-branch layer, the
//! plain windowed baseline, and their cost accounting.

pub mod acam;
pub mod cost;
pub mod macs;
pub mod msa;
pub mod window;

pub use acam::{AcamLayer, Branch};
pub use cost::CostModel;
pub use macs::{write_mac_csv, MacReport, MacRow};
pub use msa::WindowMsa;
pub use window::WindowGeometry;

use crate::error::Result;
use crate::params::Ctx;
use crate::tensor::Var;

/// Attention sublayer of a transformer block.
#[derive(Debug, Clone)]
pub enum WindowAttention {
    Acam(AcamLayer),
    Msa(WindowMsa),
}

impl WindowAttention {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            WindowAttention::Acam(l) => l.forward(ctx, x),
            WindowAttention::Msa(l) => l.forward(ctx, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            WindowAttention::Acam(l) => l.param_count(),
            WindowAttention::Msa(l) => l.param_count(),
        }
    }

    pub fn count_actual_macs(&self) -> MacReport {
        match self {
            WindowAttention::Acam(l) => l.count_actual_macs(),
            WindowAttention::Msa(l) => l.count_actual_macs(),
        }
    }

    pub fn geometry(&self) -> WindowGeometry {
        match self {
            WindowAttention::Acam(l) => l.geom,
            WindowAttention::Msa(l) => l.geom,
        }
    }
}
