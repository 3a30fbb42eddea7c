//! Compute and on-chip memory arithmetic for accelerator budgeting.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::network::{layer_name, ActivePlan, NetworkConfig, REG_CHANNELS};
use crate::pcd_io::PointCloud;
use crate::pillarizer::{pillarize, PillarSet};
use crate::sparse::Rulebook;

/// Compute budget per frame, in GMAC.
pub const GMAC_BUDGET: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMacs {
    pub name: String,
    pub kind: String,
    /// Active `(offset, input, output)` triples; points for the encoder.
    pub taps: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    pub total_macs: u64,
    pub total_gmac: f64,
    pub budget_gmac: f64,
    pub pass: bool,
}

impl MacReport {
    pub fn new(layers: Vec<LayerMacs>) -> Self {
        let total_macs = layers.iter().map(|l| l.macs).sum();
        let total_gmac = total_macs as f64 / 1e9;
        Self {
            layers,
            total_macs,
            total_gmac,
            budget_gmac: GMAC_BUDGET,
            pass: total_gmac <= GMAC_BUDGET,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:<12} {:>12} {:>16}", "layer", "kind", "taps", "MACs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<24} {:<12} {:>12} {:>16}", l.name, l.kind, l.taps, l.macs);
        }
        let _ = writeln!(
            s,
            "total {} MAC = {:.4} GMAC (budget {} GMAC): {}",
            self.total_macs,
            self.total_gmac,
            self.budget_gmac,
            if self.pass { "PASS" } else { "OVER BUDGET" }
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Multiply-accumulates of one sparse convolution over a built rulebook.
pub fn count_macs_layer(cin: usize, cout: usize, rb: &Rulebook) -> u64 {
    rb.num_pairs() * cin as u64 * cout as u64
}

fn conv(name: String, kind: &str, cin: usize, cout: usize, rb: &Rulebook) -> LayerMacs {
    LayerMacs {
        name,
        kind: kind.to_string(),
        taps: rb.num_pairs(),
        macs: count_macs_layer(cin, cout, rb),
    }
}

/// MAC count of the whole network on a pillarized frame. Only the active
/// sets are propagated; no arithmetic is run.
pub fn count_macs_pillars(pillars: &PillarSet, net: &NetworkConfig) -> Result<MacReport> {
    net.validate()?;
    let points = pillars.num_points() as u64;
    let h = net.encoder_hidden();
    let mut layers = vec![LayerMacs {
        name: "encoder".into(),
        kind: "linear".into(),
        taps: points,
        macs: points * pillars.num_features as u64 * h as u64,
    }];
    let plan = ActivePlan::build(&Arc::new(pillars.active_set()), net.stage_depths.len())?;
    for (s, sp) in plan.stages.iter().enumerate() {
        let (cin, cout) = net.stage_io(s);
        layers.push(conv(layer_name(s, 0), "downsample", cin, cout, &sp.down));
        for l in 1..=net.stage_depths[s] {
            layers.push(conv(layer_name(s, l), "submanifold", cout, cout, &sp.subm));
        }
    }
    layers.push(conv("align".into(), "pointwise", net.stage_channels[1], net.align_channels, &plan.pointwise));
    for (name, out) in [("head.heatmap", net.num_classes), ("head.regression", REG_CHANNELS)] {
        layers.push(conv(format!("{name}.conv"), "submanifold", net.align_channels, net.head_channels, plan.head_subm()));
        layers.push(conv(format!("{name}.out"), "pointwise", net.head_channels, out, &plan.pointwise));
    }
    Ok(MacReport::new(layers))
}

pub fn count_macs_network(cloud: &PointCloud, cfg: &EngineConfig) -> Result<MacReport> {
    cfg.validate()?;
    let pillars = pillarize(cloud, &cfg.grid, &cfg.features)?;
    count_macs_pillars(&pillars, &cfg.network)
}

/// Line-buffer cells an Im2Col stage needs to stream a `k`-context window
/// over a raster-ordered grid.
///
/// 2D `[X, Y]` with context `[kx, ky]`: `X * (ky - 1) + kx`.
/// 3D `[X, Y, Z]` with context `[kx, ky, kz]`:
/// `Z * X * (ky - 1) + X * (kz - 1) + kx`.
pub fn im2col_buffer_cells(dims: &[u64], context: &[u64]) -> Result<u64> {
    if dims.len() != context.len() || !(2..=3).contains(&dims.len()) {
        return Err(Error::Param(format!(
            "need 2 or 3 dims with matching context, got {} and {}",
            dims.len(),
            context.len()
        )));
    }
    if let Some(d) = dims.iter().find(|&&d| d == 0) {
        return Err(Error::Param(format!("dimension {d} must be positive")));
    }
    if let Some(k) = context.iter().find(|&&k| k == 0 || k % 2 == 0) {
        return Err(Error::Param(format!("context {k} must be positive and odd")));
    }
    let width = dims[0];
    let (kx, ky) = (context[0], context[1]);
    let cells = if dims.len() == 2 {
        width * (ky - 1) + kx
    } else {
        dims[2] * width * (ky - 1) + width * (context[2] - 1) + kx
    };
    Ok(cells)
}

/// Largest per-frame workload, in GMAC, an accelerator doing
/// `macs_per_cycle` at `clock_hz` sustains at `frame_rate_hz`.
pub fn dpu_budget(macs_per_cycle: u64, clock_hz: f64, frame_rate_hz: f64) -> Result<f64> {
    if macs_per_cycle == 0 || !(clock_hz > 0.0) || !(frame_rate_hz > 0.0) {
        return Err(Error::Param(format!(
            "budget inputs must be positive: {macs_per_cycle} MAC/cycle, {clock_hz} Hz, {frame_rate_hz} Hz"
        )));
    }
    Ok(macs_per_cycle as f64 * clock_hz / frame_rate_hz / 1e9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_tap_count;
    use crate::sparse::{ActiveSet, Coord};

    #[test]
    fn buffer_constants() {
        assert_eq!(im2col_buffer_cells(&[640, 720, 40], &[3, 3, 3]).unwrap(), 52483);
        assert_eq!(im2col_buffer_cells(&[640, 720], &[3, 3]).unwrap(), 1283);
        assert_eq!(im2col_buffer_cells(&[1, 1], &[1, 1]).unwrap(), 1);
    }

    #[test]
    fn buffer_rejects_bad_context() {
        assert!(im2col_buffer_cells(&[640, 720], &[3, 2]).is_err());
        assert!(im2col_buffer_cells(&[640, 720], &[3, 3, 3]).is_err());
        assert!(im2col_buffer_cells(&[0, 720], &[3, 3]).is_err());
    }

    #[test]
    fn budget_values() {
        assert_eq!(dpu_budget(2048, 300e6, 10.0).unwrap(), 61.44);
        assert_eq!(dpu_budget(1, 1.0, 1.0).unwrap() * 1e9, 1.0);
        assert_eq!(dpu_budget(2048, 300e6, 20.0).unwrap(), 61.44 / 2.0);
        assert!(dpu_budget(0, 1.0, 1.0).is_err());
        assert!(dpu_budget(1, -1.0, 1.0).is_err());
    }

    #[test]
    fn single_site_layer() {
        let set = Arc::new(ActiveSet::new(8, 8, [Coord::new(3, 3)]).unwrap());
        let rb = Rulebook::submanifold(&set, 3).unwrap();
        assert_eq!(count_macs_layer(4, 5, &rb), 20);
        let empty = Rulebook::submanifold(&Arc::new(ActiveSet::empty(8, 8)), 3).unwrap();
        assert_eq!(count_macs_layer(4, 5, &empty), 0);
    }

    #[test]
    fn dense_layer_matches_enumeration() {
        let set = Arc::new(ActiveSet::new(8, 8, (0..64).map(|k| Coord::new(k % 8, k / 8))).unwrap());
        let rb = Rulebook::submanifold(&set, 3).unwrap();
        assert_eq!(count_macs_layer(4, 4, &rb), brute_tap_count(&set, &set, 3, 1, 1) * 16);
        // 3n - 2 taps per axis
        assert_eq!(rb.num_pairs(), 22 * 22);
    }

    #[test]
    fn empty_frame_costs_nothing() {
        let report = count_macs_network(&PointCloud::default(), &EngineConfig::default()).unwrap();
        assert_eq!(report.total_macs, 0);
        assert!(report.pass);
        assert_eq!(report.layers.len(), 1 + 34 + 1 + 4);
    }

    #[test]
    fn report_totals() {
        let r = MacReport::new(vec![
            LayerMacs { name: "a".into(), kind: "x".into(), taps: 1, macs: 20_000_000_000 },
            LayerMacs { name: "b".into(), kind: "x".into(), taps: 1, macs: 10_000_000_001 },
        ]);
        assert_eq!(r.total_macs, 30_000_000_001);
        assert!(!r.pass);
        assert!(r.to_table().contains("OVER BUDGET"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["layers"][1]["name"], "b");
    }
}
