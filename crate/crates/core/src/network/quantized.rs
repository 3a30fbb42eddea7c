use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pillarizer::PillarSet;
use crate::quant::{calibrate, range_params, CalibrationMode, QuantParams};
use crate::reparam::{ConvKind, FusedConvLayer};
use crate::sparse::{conv_int8, sparse_add_projected_q, QuantConv, QuantTensor, RealTensor};

use super::config::{NetworkConfig, REG_CHANNELS};
use super::dbpfn::QuantEncoder;
use super::forward::forward_float_observed;
use super::graph::{align_node, fusion_node, GraphNode, OpKind, TraceEvent};
use super::model::{layer_name, ConvLayer, Model};
use super::plan::ActivePlan;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantStage {
    pub layers: Vec<QuantConv>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantHeadBranch {
    pub conv: QuantConv,
    pub out: QuantConv,
}

/// Fully integer network. Layer kinds follow from position exactly as in
/// the fused real-valued model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub config: NetworkConfig,
    pub encoder: QuantEncoder,
    pub stages: Vec<QuantStage>,
    pub align: QuantConv,
    /// Output parameters of the two multi-scale additions.
    pub fuse: [QuantParams; 2],
    pub heatmap: QuantHeadBranch,
    pub regression: QuantHeadBranch,
}

#[derive(Debug, Clone)]
pub struct QuantOutput {
    pub heatmap: QuantTensor,
    pub regression: QuantTensor,
    pub stage_active: Vec<usize>,
    pub trace: Vec<TraceEvent>,
}

fn conv_node(name: String, kind: ConvKind, c: &QuantConv) -> GraphNode {
    GraphNode::new(
        name,
        OpKind::Conv {
            kind,
            kernel: c.size,
            cin: c.cin,
            cout: c.cout,
            relu: c.relu,
        },
    )
}

fn check(name: &str, c: &QuantConv, size: usize, cin: usize, cout: usize, relu: bool) -> Result<()> {
    if (c.size, c.cin, c.cout, c.relu) != (size, cin, cout, relu) {
        return Err(Error::Structure(format!(
            "{name}: {}x{} {}->{} relu={}, expected {size}x{size} {cin}->{cout} relu={relu}",
            c.size, c.size, c.cin, c.cout, c.relu
        )));
    }
    Ok(())
}

impl QuantModel {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if 2 * self.encoder.hidden != cfg.encoder_out {
            return Err(Error::Structure(format!("encoder width {} but config expects {}", 2 * self.encoder.hidden, cfg.encoder_out)));
        }
        if self.stages.len() != 4 {
            return Err(Error::Structure(format!("{} stages, expected 4", self.stages.len())));
        }
        let mut prev = self.encoder.output;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.layers.len() != cfg.stage_depths[s] + 1 {
                return Err(Error::Structure(format!("stage {} has {} layers", s + 1, stage.layers.len())));
            }
            let (cin, cout) = cfg.stage_io(s);
            for (l, c) in stage.layers.iter().enumerate() {
                let name = layer_name(s, l);
                check(&name, c, 3, if l == 0 { cin } else { cout }, cout, true)?;
                if c.input != prev {
                    return Err(Error::Structure(format!("{name}: input parameters differ from producer output")));
                }
                prev = c.output;
            }
        }
        check("align", &self.align, 1, cfg.stage_channels[1], cfg.align_channels, false)?;
        if self.align.input != self.stages[1].layers.last().unwrap().output {
            return Err(Error::Structure("align: input parameters differ from stage 2 output".into()));
        }
        for (name, b, out) in [
            ("head.heatmap", &self.heatmap, cfg.num_classes),
            ("head.regression", &self.regression, REG_CHANNELS),
        ] {
            check(&format!("{name}.conv"), &b.conv, 3, cfg.align_channels, cfg.head_channels, true)?;
            check(&format!("{name}.out"), &b.out, 1, cfg.head_channels, out, false)?;
            if b.conv.input != self.fuse[1] || b.out.input != b.conv.output {
                return Err(Error::Structure(format!("{name}: input parameters differ from producer output")));
            }
        }
        Ok(())
    }

    pub fn graph(&self) -> Vec<GraphNode> {
        let mut nodes = vec![GraphNode::new("encoder", OpKind::PillarEncode)];
        for (s, stage) in self.stages.iter().enumerate() {
            for (l, c) in stage.layers.iter().enumerate() {
                let kind = if l == 0 { ConvKind::Downsample } else { ConvKind::Submanifold };
                nodes.push(conv_node(layer_name(s, l), kind, c));
            }
        }
        nodes.push(align_node(self.align.cin, self.align.cout));
        nodes.push(fusion_node(1));
        nodes.push(fusion_node(2));
        for (name, b) in [("head.heatmap", &self.heatmap), ("head.regression", &self.regression)] {
            nodes.push(conv_node(format!("{name}.conv"), ConvKind::Submanifold, &b.conv));
            nodes.push(conv_node(format!("{name}.out"), ConvKind::Submanifold, &b.out));
        }
        nodes
    }
}

enum RangeStat {
    MinMax(f32, f32),
    Samples(Vec<f32>),
}

/// Per-activation statistics gathered over calibration frames.
pub struct ActivationStats {
    mode: CalibrationMode,
    entries: BTreeMap<String, RangeStat>,
}

impl ActivationStats {
    pub fn new(mode: CalibrationMode) -> Self {
        Self {
            mode,
            entries: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, name: &str, x: &RealTensor) {
        if x.is_empty() {
            return;
        }
        let entry = self.entries.entry(name.to_string()).or_insert_with(|| match self.mode {
            CalibrationMode::Minmax => RangeStat::MinMax(f32::INFINITY, f32::NEG_INFINITY),
            CalibrationMode::Percentile(_) => RangeStat::Samples(Vec::new()),
        });
        match entry {
            RangeStat::MinMax(lo, hi) => {
                for &v in x.data() {
                    *lo = lo.min(v);
                    *hi = hi.max(v);
                }
            }
            RangeStat::Samples(s) => s.extend_from_slice(x.data()),
        }
    }

    pub fn qparams(&self, name: &str) -> Result<QuantParams> {
        match self.entries.get(name) {
            None => Err(Error::Calibration(format!("no activations observed for {name}"))),
            Some(RangeStat::MinMax(lo, hi)) => range_params(*lo, *hi),
            Some(RangeStat::Samples(s)) => calibrate(s, self.mode),
        }
    }
}

fn quant_conv(layer: &FusedConvLayer, input: QuantParams, output: QuantParams, relu: bool) -> Result<QuantConv> {
    QuantConv::new(&layer.kernel, &layer.bias, input, output, relu)
}

/// Post-training quantization: runs the real-valued network over the
/// calibration frames, derives per-activation parameters and quantizes
/// weights per output channel.
pub fn calibrate_model(
    model: &Model,
    frames: &[PillarSet],
    input: Vec<QuantParams>,
    mode: CalibrationMode,
) -> Result<QuantModel> {
    if frames.is_empty() {
        return Err(Error::Calibration("no calibration frames".into()));
    }
    model.validate()?;
    let fused = model.fused()?;
    let mut stats = ActivationStats::new(mode);
    for frame in frames {
        forward_float_observed(&fused, frame, &mut |name: &str, x: &RealTensor| stats.observe(name, x))?;
    }
    let encoder = QuantEncoder::new(&fused.encoder, input, stats.qparams("encoder")?)?;
    let mut prev = encoder.output;
    let mut stages = Vec::with_capacity(fused.stages.len());
    for (s, stage) in fused.stages.iter().enumerate() {
        let mut layers = Vec::with_capacity(stage.layers.len());
        for (l, layer) in stage.layers.iter().enumerate() {
            let ConvLayer::Fused(f) = layer else { unreachable!("model was fused") };
            let out = stats.qparams(&layer_name(s, l))?;
            layers.push(quant_conv(f, prev, out, true)?);
            prev = out;
        }
        stages.push(QuantStage { layers });
    }
    let s2 = stages[1].layers.last().unwrap().output;
    let align = quant_conv(&fused.align, s2, stats.qparams("align")?, false)?;
    let fuse = [stats.qparams("fuse1")?, stats.qparams("fuse2")?];
    let branch = |name: &str, b: &super::model::HeadBranch| -> Result<QuantHeadBranch> {
        let hidden = stats.qparams(&format!("{name}.conv"))?;
        Ok(QuantHeadBranch {
            conv: quant_conv(&b.conv, fuse[1], hidden, true)?,
            out: quant_conv(&b.out, hidden, stats.qparams(&format!("{name}.out"))?, false)?,
        })
    };
    let heatmap = branch("head.heatmap", &fused.heatmap)?;
    let regression = branch("head.regression", &fused.regression)?;
    let qm = QuantModel {
        config: fused.config.clone(),
        encoder,
        stages,
        align,
        fuse,
        heatmap,
        regression,
    };
    qm.validate()?;
    Ok(qm)
}

fn record(trace: &mut Vec<TraceEvent>, node: GraphNode, x: &QuantTensor) {
    trace.push(TraceEvent { node, active: x.len() });
}

/// Integer forward pass. Every arithmetic step is exact or a fixed-point
/// rescale, so the output does not depend on scheduling.
pub fn forward_int8(model: &QuantModel, pillars: &PillarSet) -> Result<QuantOutput> {
    let graph = model.graph();
    let mut nodes = graph.into_iter();
    let mut trace = Vec::new();
    let mut cur = model.encoder.encode(pillars)?;
    record(&mut trace, nodes.next().unwrap(), &cur);
    let plan = ActivePlan::build(&Arc::clone(cur.active()), model.stages.len())?;
    let mut outs = Vec::with_capacity(model.stages.len());
    for (stage, sp) in model.stages.iter().zip(&plan.stages) {
        for (l, conv) in stage.layers.iter().enumerate() {
            let rb = if l == 0 { &sp.down } else { &sp.subm };
            cur = conv_int8(&cur, rb, conv)?;
            record(&mut trace, nodes.next().unwrap(), &cur);
        }
        outs.push(cur.clone());
    }
    let aligned = conv_int8(&outs[1], &plan.pointwise, &model.align)?;
    record(&mut trace, nodes.next().unwrap(), &aligned);
    let f1 = sparse_add_projected_q(&aligned, &outs[2], 2, model.fuse[0])?;
    record(&mut trace, nodes.next().unwrap(), &f1);
    let f2 = sparse_add_projected_q(&f1, &outs[3], 4, model.fuse[1])?;
    record(&mut trace, nodes.next().unwrap(), &f2);
    let mut branch = |b: &QuantHeadBranch| -> Result<QuantTensor> {
        let h = conv_int8(&f2, plan.head_subm(), &b.conv)?;
        record(&mut trace, nodes.next().unwrap(), &h);
        let y = conv_int8(&h, &plan.pointwise, &b.out)?;
        record(&mut trace, nodes.next().unwrap(), &y);
        Ok(y)
    };
    let heatmap = branch(&model.heatmap)?;
    let regression = branch(&model.regression)?;
    Ok(QuantOutput {
        heatmap,
        regression,
        stage_active: plan.stage_active(),
        trace,
    })
}
