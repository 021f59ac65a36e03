//! Analytic parameter and FLOP accounting for the decoder and head.
//!
//! One multiply-accumulate counts as one FLOP. Convolutions cost
//! `k*k*C_in/groups*C_out` per output pixel, a selective scan
//! `L*d_inner*d_state` per direction, bilinear sampling 4 per tap and
//! channel, bicubic interpolation 16 per output element. Normalisation and
//! pointwise activations are not counted.

use std::fmt::Write as _;

use crate::decoder::{DecoderConfig, Upsample};
use crate::error::{Error, Result};
use crate::ssm::{directions, Ss2dConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost { params: self.params + o.params, flops: self.flops + o.flops }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// `k x k` convolution producing an `out_pixels` map.
pub fn conv_cost(cin: usize, cout: usize, k: usize, groups: usize, bias: bool, out_pixels: usize) -> Cost {
    let per_pixel = u(k * k * (cin / groups) * cout);
    Cost { params: per_pixel + if bias { u(cout) } else { 0 }, flops: per_pixel * u(out_pixels) }
}

pub fn linear_cost(cin: usize, cout: usize, bias: bool, positions: usize) -> Cost {
    conv_cost(cin, cout, 1, 1, bias, positions)
}

pub fn layer_norm_cost(channels: usize) -> Cost {
    Cost { params: u(2 * channels), flops: 0 }
}

pub fn ss2d_cost(channels: usize, cfg: &Ss2dConfig, pixels: usize) -> Result<Cost> {
    let di = cfg.d_inner(channels);
    let r = cfg.rank(channels);
    let n = cfg.d_state;
    let per_direction = linear_cost(di, r + 2 * n, false, pixels)
        + linear_cost(r, di, true, pixels)
        + Cost { params: u(di * n + di), flops: u(pixels * di * n) };
    Ok(linear_cost(channels, 2 * di, false, pixels)
        + conv_cost(di, di, 3, di, true, pixels)
        + (0..directions(cfg.directions)?.len()).map(|_| per_direction).sum()
        + layer_norm_cost(di)
        + linear_cost(di, channels, false, pixels))
}

/// Deformable 3x3 conv with its 27-channel predictor.
pub fn dcn_cost(cin: usize, cout: usize, pixels: usize) -> Cost {
    conv_cost(cin, cout, 3, 1, true, pixels)
        + conv_cost(cin, 27, 3, 1, true, pixels)
        + Cost { params: 0, flops: u(4 * 9 * cin * pixels) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEntry {
    /// Parameter path prefix of the module this entry covers.
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    fn push(&mut self, name: String, c: Cost) {
        self.entries.push(CostEntry { name, params: c.params, flops: c.flops });
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    /// Sum over entries whose name starts with `prefix`.
    pub fn params_under(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.params).sum()
    }
}

/// Decoder blocks plus segmentation head at input resolution `h x w`.
pub fn model_head_cost(cfg: &DecoderConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("resolution {h}x{w} must be a positive multiple of 32")));
    }
    let mut r = CostReport { height: h, width: w, entries: Vec::new() };
    for s in 1..=4 {
        let c = cfg.stage_channels(s);
        let pix = (h >> (6 - s)) * (w >> (6 - s));
        let p = format!("decoder.blocks.{}", s - 1);
        r.push(format!("{p}.scan"), ss2d_cost(c, &cfg.ss2d, pix)?);
        if cfg.deformable {
            r.push(format!("{p}.dcn"), dcn_cost(c, c, pix));
        } else {
            r.push(format!("{p}.conv"), conv_cost(c, c, 3, 1, true, pix));
        }
        let fused = 2 * c;
        let fusion: Cost =
            (0..cfg.fusion_depth).map(|_| conv_cost(fused, fused, 3, fused, true, pix) + layer_norm_cost(fused)).sum();
        r.push(format!("{p}.fusion"), fusion);
        if s == 4 {
            if cfg.final_proj {
                r.push(format!("{p}.proj"), linear_cost(fused, cfg.channels[0], true, pix));
            }
        } else {
            let next = cfg.stage_channels(s + 1);
            let up = 4 * pix;
            match cfg.upsample {
                Upsample::PixelShuffle => {}
                Upsample::Bilinear | Upsample::Bicubic => {
                    let taps = if cfg.upsample == Upsample::Bilinear { 4 } else { 16 };
                    let interp = Cost { params: 0, flops: u(taps * fused * up) };
                    r.push(format!("{p}.reduce"), interp + linear_cost(fused, c / 2, false, up));
                }
            }
            r.push(format!("{p}.proj"), linear_cost(c / 2, next, true, up));
        }
    }
    let cin = cfg.out_channels();
    let quarter = (h / 4) * (w / 4);
    let k = cfg.num_classes;
    r.push("head.linear".into(), linear_cost(cin, cin, true, quarter));
    r.push("head.norm".into(), layer_norm_cost(cin));
    r.push(
        "head.classifier".into(),
        conv_cost(cin, k, 3, 1, true, quarter) + Cost { params: 0, flops: u(4 * k * h * w) },
    );
    Ok(r)
}

pub fn count_params(cfg: &DecoderConfig) -> Result<u64> {
    Ok(model_head_cost(cfg, 32, 32)?.total_params())
}

pub fn count_flops(cfg: &DecoderConfig, h: usize, w: usize) -> Result<u64> {
    Ok(model_head_cost(cfg, h, w)?.total_flops())
}

/// Published decoder cost for one encoder width schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub backbone: &'static str,
    pub channels: [usize; 4],
    pub params_m: f64,
    pub flops_g: f64,
}

pub const TARGETS: [Target; 2] = [
    Target { backbone: "vmamba-t", channels: [96, 192, 384, 768], params_m: 11.2, flops_g: 6.0 },
    Target { backbone: "resnet-50", channels: [256, 512, 1024, 2048], params_m: 77.3, flops_g: 38.8 },
];

pub const PARAM_TOLERANCE: f64 = 0.10;
pub const FLOP_TOLERANCE: f64 = 0.15;

/// Published cost of a competing head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadCost {
    pub backbone: &'static str,
    pub head: &'static str,
    pub params_m: f64,
    pub flops_g: f64,
}

pub const REFERENCE_HEADS: [HeadCost; 9] = [
    HeadCost { backbone: "resnet-50", head: "UperHead", params_m: 40.5, flops_g: 250.7 },
    HeadCost { backbone: "resnet-50", head: "MusterHead", params_m: 203.1, flops_g: 211.5 },
    HeadCost { backbone: "resnet-50", head: "CGRHead", params_m: 282.6, flops_g: 31.4 },
    HeadCost { backbone: "swin-t", head: "UperHead", params_m: 31.5, flops_g: 206.9 },
    HeadCost { backbone: "swin-t", head: "MusterHead", params_m: 19.1, flops_g: 21.4 },
    HeadCost { backbone: "swin-t", head: "CGRHead", params_m: 40.6, flops_g: 5.0 },
    HeadCost { backbone: "vmamba-t", head: "UperHead", params_m: 31.5, flops_g: 206.9 },
    HeadCost { backbone: "vmamba-t", head: "MusterHead", params_m: 19.1, flops_g: 21.4 },
    HeadCost { backbone: "vmamba-t", head: "CGRHead", params_m: 40.6, flops_g: 5.0 },
];

/// Published cost of this decoder; the Swin-T and VMamba-T rows coincide.
pub const OURS: [HeadCost; 2] = [
    HeadCost { backbone: "resnet-50", head: "ours", params_m: 77.3, flops_g: 38.8 },
    HeadCost { backbone: "swin-t/vmamba-t", head: "ours", params_m: 11.2, flops_g: 6.0 },
];

/// Headline reductions to be explained by some pairing of table values.
pub const CLAIMED_PARAM_REDUCTION: f64 = 72.0;
pub const CLAIMED_FLOP_REDUCTION: f64 = 97.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    /// Backbone row of our published cost.
    pub ours: &'static str,
    pub backbone: &'static str,
    pub head: &'static str,
    /// Both figures come from the same backbone table.
    pub same_table: bool,
    pub param_pct: f64,
    pub flop_pct: f64,
}

impl Reduction {
    /// Rounds to the claimed parameter reduction.
    pub fn matches_params(&self) -> bool {
        self.param_pct.round() == CLAIMED_PARAM_REDUCTION
    }

    pub fn matches_flops(&self) -> bool {
        self.flop_pct.round() == CLAIMED_FLOP_REDUCTION
    }
}

/// `1 - ours / theirs` for each published size of ours against every head.
pub fn reductions() -> Vec<Reduction> {
    OURS.iter()
        .flat_map(|o| {
            REFERENCE_HEADS.iter().map(move |h| Reduction {
                ours: o.backbone,
                backbone: h.backbone,
                head: h.head,
                same_table: o.backbone.split('/').any(|b| b == h.backbone),
                param_pct: 100.0 * (1.0 - o.params_m / h.params_m),
                flop_pct: 100.0 * (1.0 - o.flops_g / h.flops_g),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub target: Target,
    pub params: u64,
    pub flops: u64,
}

impl Comparison {
    pub fn params_delta(&self) -> f64 {
        self.params as f64 / (self.target.params_m * 1e6) - 1.0
    }

    pub fn flops_delta(&self) -> f64 {
        self.flops as f64 / (self.target.flops_g * 1e9) - 1.0
    }

    pub fn params_ok(&self) -> bool {
        self.params_delta().abs() <= PARAM_TOLERANCE
    }

    pub fn flops_ok(&self) -> bool {
        self.flops_delta().abs() <= FLOP_TOLERANCE
    }
}

/// Cost of `cfg` at `h x w`, compared to the published figure when its widths
/// match one of [`TARGETS`].
pub struct EfficiencyReport {
    pub cost: CostReport,
    pub comparison: Option<Comparison>,
    pub reductions: Vec<Reduction>,
}

pub fn efficiency_report(cfg: &DecoderConfig, h: usize, w: usize) -> Result<EfficiencyReport> {
    let cost = model_head_cost(cfg, h, w)?;
    let comparison = TARGETS.iter().find(|t| t.channels[..] == cfg.channels[..]).map(|t| Comparison {
        target: *t,
        params: cost.total_params(),
        flops: cost.total_flops(),
    });
    Ok(EfficiencyReport { cost, comparison, reductions: reductions() })
}

impl EfficiencyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.cost;
        let _ = writeln!(s, "decoder cost at {}x{}", c.height, c.width);
        let _ = writeln!(s, "{:<32} {:>14} {:>16}", "module", "params", "flops");
        for e in &c.entries {
            let _ = writeln!(s, "{:<32} {:>14} {:>16}", e.name, e.params, e.flops);
        }
        let _ = writeln!(s, "{:<32} {:>14} {:>16}", "total", c.total_params(), c.total_flops());
        if let Some(cmp) = &self.comparison {
            let _ = writeln!(s);
            let _ = writeln!(s, "published ({} widths): {:.1} M params, {:.1} G FLOPs", cmp.target.backbone, cmp.target.params_m, cmp.target.flops_g);
            let verdict = |ok: bool| if ok { "within" } else { "outside" };
            let _ = writeln!(
                s,
                "computed: {:.2} M params ({:+.1}%, {} ±{:.0}%), {:.2} G FLOPs ({:+.1}%, {} ±{:.0}%)",
                cmp.params as f64 / 1e6,
                100.0 * cmp.params_delta(),
                verdict(cmp.params_ok()),
                100.0 * PARAM_TOLERANCE,
                cmp.flops as f64 / 1e9,
                100.0 * cmp.flops_delta(),
                verdict(cmp.flops_ok()),
                100.0 * FLOP_TOLERANCE,
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "reductions versus published heads (claimed {CLAIMED_PARAM_REDUCTION:.0}% params, {CLAIMED_FLOP_REDUCTION:.0}% FLOPs)");
        let _ = writeln!(s, "{:<16} {:<10} {:<11} {:>5} {:>9} {:>9}", "ours", "backbone", "head", "table", "params%", "flops%");
        for r in &self.reductions {
            let mark = match (r.matches_params(), r.matches_flops()) {
                (true, true) => "  <- params, flops",
                (true, false) => "  <- params",
                (false, true) => "  <- flops",
                _ => "",
            };
            let table = if r.same_table { "same" } else { "cross" };
            let _ = writeln!(
                s,
                "{:<16} {:<10} {:<11} {:>5} {:>9.1} {:>9.1}{mark}",
                r.ours, r.backbone, r.head, table, r.param_pct, r.flop_pct
            );
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let c = &self.cost;
        let _ = writeln!(s, "resolution={}x{}", c.height, c.width);
        for e in &c.entries {
            let _ = writeln!(s, "params.{}={}", e.name, e.params);
            let _ = writeln!(s, "flops.{}={}", e.name, e.flops);
        }
        let _ = writeln!(s, "params.total={}", c.total_params());
        let _ = writeln!(s, "flops.total={}", c.total_flops());
        if let Some(cmp) = &self.comparison {
            let _ = writeln!(s, "target.backbone={}", cmp.target.backbone);
            let _ = writeln!(s, "target.params_m={}", cmp.target.params_m);
            let _ = writeln!(s, "target.flops_g={}", cmp.target.flops_g);
            let _ = writeln!(s, "delta.params_pct={:.3}", 100.0 * cmp.params_delta());
            let _ = writeln!(s, "delta.flops_pct={:.3}", 100.0 * cmp.flops_delta());
            let _ = writeln!(s, "ok.params={}", cmp.params_ok());
            let _ = writeln!(s, "ok.flops={}", cmp.flops_ok());
        }
        for r in &self.reductions {
            let key = format!("reduction.{}.{}.{}", r.ours, r.backbone, r.head);
            let _ = writeln!(s, "{key}.params_pct={:.2}", r.param_pct);
            let _ = writeln!(s, "{key}.flops_pct={:.2}", r.flop_pct);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        assert_eq!(conv_cost(16, 32, 3, 1, true, 1).params, 4640);
        assert_eq!(linear_cost(768, 13, true, 1).params, 9997);
        assert_eq!(linear_cost(8, 8, false, 16).flops, 1024);
    }

    #[test]
    fn params_resolution_independent_and_flops_scale() {
        let cfg = DecoderConfig::default();
        let a = model_head_cost(&cfg, 256, 256).unwrap();
        let b = model_head_cost(&cfg, 512, 512).unwrap();
        assert_eq!(a.total_params(), b.total_params());
        let conv = conv_cost(8, 16, 3, 1, true, 64 * 64);
        assert_eq!(conv_cost(8, 16, 3, 1, true, 128 * 128).flops, 4 * conv.flops);
        // Every counted term is per-pixel, so the whole decoder scales too.
        assert_eq!(b.total_flops(), 4 * a.total_flops());
    }

    #[test]
    fn deformable_off_is_cheaper() {
        let on = DecoderConfig::default();
        let off = DecoderConfig { deformable: false, ..on.clone() };
        let (a, b) = (model_head_cost(&on, 512, 512).unwrap(), model_head_cost(&off, 512, 512).unwrap());
        assert!(b.total_params() < a.total_params());
        assert!(b.total_flops() < a.total_flops());
    }

    #[test]
    fn headline_ratios_are_recovered() {
        let rs = reductions();
        let p: Vec<_> = rs.iter().filter(|r| r.matches_params()).map(|r| (r.ours, r.backbone, r.head, r.same_table)).collect();
        let f: Vec<_> = rs.iter().filter(|r| r.matches_flops()).map(|r| (r.ours, r.backbone, r.head, r.same_table)).collect();
        // 1 - 11.2/40.6 = 72.4%, 1 - 11.2/40.5 = 72.3%
        assert!(p.contains(&("swin-t/vmamba-t", "vmamba-t", "CGRHead", true)));
        assert!(p.contains(&("swin-t/vmamba-t", "resnet-50", "UperHead", false)));
        // 1 - 6.0/206.9 = 97.1%
        assert!(f.contains(&("swin-t/vmamba-t", "vmamba-t", "UperHead", true)));
    }

    #[test]
    fn rejects_bad_resolution() {
        assert!(model_head_cost(&DecoderConfig::default(), 500, 512).is_err());
    }
}
