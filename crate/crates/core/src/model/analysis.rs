//! Closed-form parameter counts and multiply-accumulate totals per module.

use std::io::Write;

use crate::attention::acam::acam_param_count;
use crate::attention::msa::msa_param_count;
use crate::attention::{CostModel, WindowGeometry};
use crate::block::{Lpm, Mlp, TransformerBlock};
use crate::ddconv::DDConvLayer;
use crate::error::Result;
use crate::model::config::{TecNetConfig, STAGES};
use crate::model::net::{ConvUnit, PatchExpand, PatchMerge, TecNet};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleParams {
    /// Prefix shared by every tensor of the module.
    pub module: String,
    pub params: usize,
}

fn block_params(cfg: &TecNetConfig, c: usize, grid: usize, heads: usize, shifted: bool) -> usize {
    let m = WindowGeometry::new(grid, grid, cfg.window_size, shifted).m;
    let attn = if cfg.toggles.use_acam {
        acam_param_count(c, m, heads, cfg.toggles.shared_kv)
    } else {
        msa_param_count(c, m, heads)
    };
    let ffn = if cfg.toggles.use_lpm {
        Lpm::param_count(c)
    } else {
        Mlp::param_count(c)
    };
    2 * LayerNorm::param_count(c) + attn + ffn
}

/// Per-module parameter counts from layer formulas alone.
pub fn count_params(cfg: &TecNetConfig) -> Vec<ModuleParams> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let k = cfg.num_classes;
    let w = |i| cfg.stage_width(i);
    let mut rows = Vec::new();
    let mut push = |module: String, params: usize| rows.push(ModuleParams { module, params });

    push("cnn.stem".into(), Conv2d::param_count(1, d, p));
    for i in 0..STAGES {
        if i > 0 {
            push(
                format!("cnn.trans{i}"),
                ConvUnit::param_count(w(i - 1), w(i), cfg),
            );
        }
        if i > 3 {
            push(
                format!("cnn.skip{i}"),
                Conv2d::param_count(2 * w(i), w(i), 1),
            );
            push(
                format!("cnn.fuse{i}"),
                Conv2d::param_count(2 * w(i), w(i), 1),
            );
        }
        push(
            format!("cnn.stage{i}"),
            ConvUnit::param_count(w(i), w(i), cfg),
        );
    }
    push("cnn.head".into(), Conv2d::param_count(d, k, 1));

    push("trans.embed".into(), Conv2d::param_count(1, d, p));
    for i in 0..STAGES {
        if (1..=3).contains(&i) {
            push(format!("trans.merge{i}"), PatchMerge::param_count(w(i - 1)));
        }
        if i > 3 {
            push(
                format!("trans.expand{i}"),
                PatchExpand::param_count(w(i - 1)),
            );
            push(
                format!("trans.skip{i}"),
                Conv2d::param_count(2 * w(i), w(i), 1),
            );
            push(
                format!("trans.fuse{i}"),
                Conv2d::param_count(2 * w(i), w(i), 1),
            );
        }
        let blocks: usize = (0..cfg.layer_numbers[i])
            .map(|j| block_params(cfg, w(i), cfg.stage_grid(i), cfg.heads[i], j % 2 == 1))
            .sum();
        push(format!("trans.stage{i}"), blocks);
    }
    push("trans.norm".into(), LayerNorm::param_count(d));
    push("trans.head".into(), Linear::param_count(d, k, true));
    push("tec.head".into(), Conv2d::param_count(2 * d, k, 1));
    rows
}

pub fn total_params(cfg: &TecNetConfig) -> usize {
    count_params(cfg).iter().map(|r| r.params).sum()
}

/// Modules whose analytic count disagrees with the instantiated tensors, as
/// `(module, analytic, enumerated)`; also reports tensors no module claims.
pub fn audit_params(cfg: &TecNetConfig, store: &ParamStore) -> Vec<(String, usize, usize)> {
    let rows = count_params(cfg);
    let mut bad: Vec<_> = rows
        .iter()
        .filter_map(|r| {
            let got = store.numel_with_prefix(&format!("{}.", r.module));
            (got != r.params).then(|| (r.module.clone(), r.params, got))
        })
        .collect();
    let claimed: usize = rows.iter().map(|r| r.params).sum();
    if claimed != store.numel() {
        bad.push(("total".into(), claimed, store.numel()));
    }
    bad
}

/// `k²·C_in·C_out·H'·W'`.
pub fn conv_macs(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (k * k * c_in * c_out * h_out * w_out) as u64
}

/// Mixed-kernel convolution, offset predictor, kernel mixing, coefficient
/// map and four-neighbor sampling of every tap.
pub fn ddconv_macs(c_in: usize, c_out: usize, k: usize, n: usize, h: usize, w: usize) -> u64 {
    let kk = k * k;
    conv_macs(c_in, c_out, k, h, w)
        + conv_macs(c_in, 2 * kk, k, h, w)
        + (n * c_out * c_in * kk + c_in * n + 4 * c_in * kk * h * w) as u64
}

fn unit_macs(cfg: &TecNetConfig, c_in: usize, c_out: usize, grid: usize) -> u64 {
    if cfg.toggles.use_ddconv {
        ddconv_macs(c_in, c_out, 3, cfg.n_kernels, grid, grid)
    } else {
        conv_macs(c_in, c_out, 3, grid, grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleMacs {
    pub module: String,
    pub macs: u64,
    /// Closed-form attention cost summed over the module's blocks.
    pub formula: Option<f64>,
}

fn block_macs(blk: &TransformerBlock) -> (u64, f64) {
    let n = blk.grid.0 * blk.grid.1;
    let att = blk.attn.count_actual_macs();
    (att.total() + blk.ffn.macs(n), att.formula)
}

/// Multiply-accumulates of one forward pass at the configured input size.
pub fn count_flops(net: &TecNet) -> Vec<ModuleMacs> {
    let cfg = &net.cfg;
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let k = cfg.num_classes;
    let n = cfg.input_size;
    let g0 = n / p;
    let w = |i| cfg.stage_width(i);
    let g = |i| cfg.stage_grid(i);
    let mut rows = Vec::new();
    let mut push = |module: String, macs: u64, formula: Option<f64>| {
        rows.push(ModuleMacs {
            module,
            macs,
            formula,
        })
    };

    push("cnn.stem".into(), conv_macs(1, d, p, g0, g0), None);
    for i in 0..STAGES {
        if i > 0 {
            push(
                format!("cnn.trans{i}"),
                unit_macs(cfg, w(i - 1), w(i), g(i)),
                None,
            );
        }
        if i > 3 {
            push(
                format!("cnn.skip{i}"),
                conv_macs(2 * w(i), w(i), 1, g(i), g(i)),
                None,
            );
            push(
                format!("cnn.fuse{i}"),
                conv_macs(2 * w(i), w(i), 1, g(i), g(i)),
                None,
            );
        }
        push(
            format!("cnn.stage{i}"),
            unit_macs(cfg, w(i), w(i), g(i)),
            None,
        );
    }
    // 1×1 head, then four taps per upsampled pixel
    push(
        "cnn.head".into(),
        conv_macs(d, k, 1, g0, g0) + (4 * k * n * n) as u64,
        None,
    );

    push("trans.embed".into(), conv_macs(1, d, p, g0, g0), None);
    for i in 0..STAGES {
        let tokens = (g(i) * g(i)) as u64;
        if (1..=3).contains(&i) {
            let c = w(i - 1) as u64;
            push(format!("trans.merge{i}"), tokens * 4 * c * 2 * c, None);
        }
        if i > 3 {
            let c = w(i - 1) as u64;
            push(
                format!("trans.expand{i}"),
                (g(i - 1) * g(i - 1)) as u64 * c * 2 * c,
                None,
            );
            push(
                format!("trans.skip{i}"),
                conv_macs(2 * w(i), w(i), 1, g(i), g(i)),
                None,
            );
            push(
                format!("trans.fuse{i}"),
                conv_macs(2 * w(i), w(i), 1, g(i), g(i)),
                None,
            );
        }
        let (macs, formula) = net.trans.stages[i]
            .iter()
            .map(block_macs)
            .fold((0, 0.0), |(a, f), (m, x)| (a + m, f + x));
        push(format!("trans.stage{i}"), macs, Some(formula));
    }
    push(
        "trans.head".into(),
        (g0 * g0 * d * k + 4 * k * n * n) as u64,
        None,
    );
    push(
        "tec.head".into(),
        conv_macs(2 * d, k, 1, g0, g0) + (4 * k * n * n) as u64,
        None,
    );
    rows
}

/// Closed-form attention costs for one block at every stage.
pub fn stage_cost_table(cfg: &TecNetConfig) -> Vec<(usize, CostModel)> {
    (0..STAGES)
        .map(|i| {
            let g = cfg.stage_grid(i);
            let m = WindowGeometry::new(g, g, cfg.window_size, false).m;
            (
                i,
                CostModel::new(g as u64, g as u64, cfg.stage_width(i) as u64, m as u64),
            )
        })
        .collect()
}

/// Human-readable report of parameter counts, MACs and attention costs.
pub fn write_report<W: Write>(out: &mut W, net: &TecNet) -> Result<()> {
    let cfg = &net.cfg;
    writeln!(
        out,
        "variant {} input {}x{}",
        cfg.variant, cfg.input_size, cfg.input_size
    )?;
    writeln!(out, "{:<16} {:>12}", "module", "params")?;
    let params = count_params(cfg);
    for r in &params {
        writeln!(out, "{:<16} {:>12}", r.module, r.params)?;
    }
    writeln!(
        out,
        "{:<16} {:>12}",
        "total",
        params.iter().map(|r| r.params).sum::<usize>()
    )?;
    writeln!(out)?;
    writeln!(
        out,
        "{:<16} {:>14} {:>16}",
        "module", "macs", "attn_formula"
    )?;
    let macs = count_flops(net);
    for r in &macs {
        let f = r
            .formula
            .map(|v| format!("{v:.0}"))
            .unwrap_or_else(|| "-".into());
        writeln!(out, "{:<16} {:>14} {:>16}", r.module, r.macs, f)?;
    }
    writeln!(
        out,
        "{:<16} {:>14}",
        "total",
        macs.iter().map(|r| r.macs).sum::<u64>()
    )?;
    writeln!(out)?;
    writeln!(
        out,
        "{:<6} {:>5} {:>5} {:>5} {:>3} {:>16} {:>16} {:>16}",
        "stage", "h", "w", "C", "M", "msa", "sw_msa", "acam"
    )?;
    for (i, m) in stage_cost_table(cfg) {
        writeln!(
            out,
            "{:<6} {:>5} {:>5} {:>5} {:>3} {:>16} {:>16} {:>16}",
            i,
            m.h,
            m.w,
            m.c,
            m.m,
            m.msa(),
            m.swmsa(),
            m.acam()
        )?;
    }
    Ok(())
}

/// DDConv parameter overhead relative to a plain 3×3 convolution.
pub fn ddconv_overhead(c_in: usize, c_out: usize, n: usize) -> usize {
    DDConvLayer::param_count(c_in, c_out, 3, n) - Conv2d::param_count(c_in, c_out, 3)
}
