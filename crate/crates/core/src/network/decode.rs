use crate::error::{Error, Result};
use crate::pillarizer::GridConfig;
use crate::sparse::{sparse_max_pool, RealTensor};

use super::config::{NetworkConfig, HEAD_STRIDE, REG_CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBox {
    pub class_id: usize,
    pub class_name: String,
    pub score: f32,
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub l: f32,
    pub w: f32,
    pub h: f32,
    pub yaw: f32,
}

/// Regressed log-sizes are clamped to this range before `exp`, keeping
/// sizes finite and positive for any logits.
pub const LOG_SIZE_LIMIT: f32 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeParams {
    pub x_min: f64,
    pub y_min: f64,
    /// Cell size of the head grid in meters.
    pub cell_x: f64,
    pub cell_y: f64,
    pub score_threshold: f32,
    pub top_k: usize,
    pub class_names: Vec<String>,
}

impl DecodeParams {
    pub fn new(grid: &GridConfig, net: &NetworkConfig, score_threshold: f32, top_k: usize) -> Self {
        Self {
            x_min: grid.x_min,
            y_min: grid.y_min,
            cell_x: grid.pillar_size_x * HEAD_STRIDE as f64,
            cell_y: grid.pillar_size_y * HEAD_STRIDE as f64,
            score_threshold,
            top_k,
            class_names: net.class_names.clone(),
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Boxes at local maxima of the class scores.
///
/// A site survives for class `c` when its score equals the 3x3 max-pool of
/// scores there and reaches the threshold. Survivors are ordered by score
/// descending, ties by `(class_id, j, i)`, and cut to `top_k`. Offsets are
/// clamped to half a cell so centers stay within their cell.
pub fn decode(heatmap: &RealTensor, regression: &RealTensor, params: &DecodeParams) -> Result<Vec<DetectionBox>> {
    if heatmap.active() != regression.active() {
        return Err(Error::Shape("heatmap and regression maps cover different sites".into()));
    }
    if regression.channels() != REG_CHANNELS || heatmap.channels() != params.class_names.len() {
        return Err(Error::Shape(format!(
            "expected {} heatmap and {REG_CHANNELS} regression channels, got {} and {}",
            params.class_names.len(),
            heatmap.channels(),
            regression.channels()
        )));
    }
    if heatmap.is_empty() || params.top_k == 0 {
        return Ok(Vec::new());
    }
    let scores = heatmap.map(sigmoid);
    let pooled = sparse_max_pool(&scores, 3)?;
    let classes = heatmap.channels();
    let mut peaks: Vec<(f32, usize, usize)> = Vec::new();
    for (o, (s, p)) in scores.data().chunks_exact(classes).zip(pooled.data().chunks_exact(classes)).enumerate() {
        for c in 0..classes {
            if s[c] == p[c] && s[c] >= params.score_threshold && s[c].is_finite() {
                peaks.push((s[c], c, o));
            }
        }
    }
    let coords = heatmap.coords();
    peaks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(coords[a.2].cmp(&coords[b.2]))
    });
    peaks.truncate(params.top_k);
    Ok(peaks
        .into_iter()
        .map(|(score, c, o)| {
            let r = regression.feature(o);
            let site = coords[o];
            let off_x = r[0].clamp(-0.5, 0.5) as f64;
            let off_y = r[1].clamp(-0.5, 0.5) as f64;
            let size = |v: f32| v.clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
            let mut yaw = r[6].atan2(r[7]);
            if yaw <= -std::f32::consts::PI {
                yaw = std::f32::consts::PI;
            }
            DetectionBox {
                class_id: c,
                class_name: params.class_names[c].clone(),
                score,
                x: ((site.i as f64 + 0.5 + off_x) * params.cell_x + params.x_min) as f32,
                y: ((site.j as f64 + 0.5 + off_y) * params.cell_y + params.y_min) as f32,
                z: r[2],
                l: size(r[3]),
                w: size(r[4]),
                h: size(r[5]),
                yaw,
            }
        })
        .collect())
}
