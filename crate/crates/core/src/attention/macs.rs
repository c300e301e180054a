//! Multiply-accumulate counts of what the attention layers actually execute,
//! set beside the closed-form costs.

use std::io::Write;

use crate::attention::acam::{AcamLayer, Branch, Projections};
use crate::attention::cost::CostModel;
use crate::attention::msa::WindowMsa;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchMacs {
    pub branch: Branch,
    pub projection: u64,
    pub attention: u64,
    pub output: u64,
}

impl BranchMacs {
    pub fn total(&self) -> u64 {
        self.projection + self.attention + self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacReport {
    pub module: String,
    pub branches: Vec<BranchMacs>,
    /// Projections computed once and shared by every branch.
    pub shared_projection: u64,
    pub final_projection: u64,
    /// Closed-form cost for the same grid, width and window.
    pub formula: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacRow {
    pub module: String,
    pub branch: String,
    pub formula_macs: Option<f64>,
    pub actual_macs: u64,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.branches.iter().map(BranchMacs::total).sum::<u64>()
            + self.shared_projection
            + self.final_projection
    }

    pub fn rows(&self) -> Vec<MacRow> {
        let row = |branch: &str, formula_macs, actual_macs| MacRow {
            module: self.module.clone(),
            branch: branch.to_string(),
            formula_macs,
            actual_macs,
        };
        let mut rows: Vec<MacRow> = self
            .branches
            .iter()
            .map(|b| row(b.branch.name(), None, b.total()))
            .collect();
        if self.shared_projection > 0 {
            rows.push(row("shared-kv", None, self.shared_projection));
        }
        rows.push(row("output", None, self.final_projection));
        rows.push(row("total", Some(self.formula), self.total()));
        rows
    }
}

pub const MAC_CSV_HEADER: &str = "module,branch,formula_macs,actual_macs";

pub fn write_mac_csv<W: Write>(w: &mut W, rows: &[MacRow]) -> Result<()> {
    writeln!(w, "{MAC_CSV_HEADER}")?;
    for r in rows {
        let f = r.formula_macs.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.module, r.branch, f, r.actual_macs)?;
    }
    Ok(())
}

impl AcamLayer {
    pub fn count_actual_macs(&self) -> MacReport {
        let g = self.geom;
        let nw = g.num_windows() as u64;
        let m = g.m;
        let mut branches = Vec::new();
        for (i, br) in Branch::ALL.into_iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            let (t, dp, _) = self.branch_dims(br);
            let (t, dp) = (t as u64, dp as u64);
            let (projection, output) = match &self.proj {
                Projections::PerBranch(_) => {
                    let d = br.layout(self.c, m).1 as u64;
                    (nw * 3 * t * d * dp, nw * t * dp * d)
                }
                Projections::SharedKv { .. } => (0, 0),
            };
            branches.push(BranchMacs {
                branch: br,
                projection,
                attention: nw * 2 * t * t * dp,
                output,
            });
        }
        let c = self.c as u64;
        let cw = self.attended_width() as u64;
        let shared_projection = match self.proj {
            Projections::SharedKv { .. } => nw * (m * m) as u64 * 2 * c * cw,
            Projections::PerBranch(_) => 0,
        };
        MacReport {
            module: if self.shared_kv() {
                "acam-shared-kv"
            } else {
                "acam"
            }
            .to_string(),
            branches,
            shared_projection,
            final_projection: (g.h * g.w) as u64 * cw * c,
            formula: CostModel::new(g.h as u64, g.w as u64, c, m as u64).acam(),
        }
    }
}

impl WindowMsa {
    pub fn count_actual_macs(&self) -> MacReport {
        let g = self.geom;
        let nw = g.num_windows() as u64;
        let t = (g.m * g.m) as u64;
        let c = self.c as u64;
        MacReport {
            module: "window-msa".to_string(),
            branches: vec![BranchMacs {
                branch: Branch::Spatial,
                projection: nw * 3 * t * c * c,
                attention: nw * 2 * t * t * c,
                output: 0,
            }],
            shared_projection: 0,
            final_projection: (g.h * g.w) as u64 * c * c,
            formula: CostModel::new(g.h as u64, g.w as u64, c, g.m as u64).swmsa(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;

    #[test]
    fn spatial_attention_product() {
        let mut b = ParamBuilder::new(0);
        let l = AcamLayer::new(&mut b, "a", 16, (8, 8), 4, 1, false, false).unwrap();
        let r = l.count_actual_macs();
        let sp = r.branches[0];
        assert_eq!(sp.branch, Branch::Spatial);
        assert_eq!(sp.attention / 4, 2 * 4u64.pow(4) * 2);
        assert_eq!(r.formula, 20480.0);
        assert_eq!(r, l.count_actual_macs());
    }

    #[test]
    fn disabling_branches_lowers_count() {
        let mut b = ParamBuilder::new(0);
        let mut l = AcamLayer::new(&mut b, "a", 32, (8, 8), 4, 2, true, false).unwrap();
        let mut last = l.count_actual_macs().total();
        for i in 1..4 {
            l.active[i] = false;
            let now = l.count_actual_macs().total();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shared_kv_projection_matches_closed_form() {
        let mut b = ParamBuilder::new(0);
        let l = AcamLayer::new(&mut b, "a", 64, (8, 8), 4, 2, false, true).unwrap();
        let r = l.count_actual_macs();
        // K and V at C/8 each: hw·C²/4
        assert_eq!(r.shared_projection, 64 * 64 * 64 / 4);
    }

    #[test]
    fn csv_layout() {
        let mut b = ParamBuilder::new(0);
        let l = AcamLayer::new(&mut b, "a", 16, (8, 8), 4, 1, false, false).unwrap();
        let mut out = Vec::new();
        write_mac_csv(&mut out, &l.count_actual_macs().rows()).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], MAC_CSV_HEADER);
        assert!(lines[1].starts_with("acam,spatial,,"));
        assert!(lines.last().unwrap().starts_with("acam,total,20480,"));
    }
}
