use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pillarizer::PillarSet;
use crate::reparam::FusedConvLayer;
use crate::sparse::{sparse_add_projected, RealTensor, Rulebook};

use super::dbpfn::dbpfn_encode;
use super::graph::{align_node, fusion_node, GraphNode, OpKind, TraceEvent};
use super::model::{layer_name, HeadBranch, Model, Stage};
use super::plan::ActivePlan;

pub type Observer<'a> = &'a mut dyn FnMut(&str, &RealTensor);

/// Collects the execution trace and hands every named activation to an
/// optional observer (used by calibration).
pub(crate) struct Recorder<'a> {
    pub trace: Vec<TraceEvent>,
    observer: Option<Observer<'a>>,
}

impl<'a> Recorder<'a> {
    pub fn new(observer: Option<Observer<'a>>) -> Self {
        Self { trace: Vec::new(), observer }
    }

    pub fn silent() -> Recorder<'static> {
        Recorder { trace: Vec::new(), observer: None }
    }

    pub fn nodes(&mut self, nodes: Vec<GraphNode>, active: usize) {
        self.trace.extend(nodes.into_iter().map(|node| TraceEvent { node, active }));
    }

    pub fn observe(&mut self, name: &str, x: &RealTensor) {
        if let Some(f) = self.observer.as_mut() {
            f(name, x);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FloatOutput {
    /// Class logits on the stage-2 grid.
    pub heatmap: RealTensor,
    pub regression: RealTensor,
    pub stage_active: Vec<usize>,
    pub trace: Vec<TraceEvent>,
}

fn check_input(x: &RealTensor, stages: &[Stage]) -> Result<()> {
    match stages.first().and_then(|s| s.layers.first()) {
        Some(l) if l.cin() == x.channels() => Ok(()),
        Some(l) => Err(Error::Shape(format!("backbone expects {} channels, got {}", l.cin(), x.channels()))),
        None => Err(Error::Structure("backbone has no layers".into())),
    }
}

fn run_backbone_with(x: &RealTensor, stages: &[Stage], plan: &ActivePlan, rec: &mut Recorder) -> Result<Vec<RealTensor>> {
    check_input(x, stages)?;
    if stages.len() != plan.stages.len() {
        return Err(Error::Structure(format!("{} stages for a {}-stage plan", stages.len(), plan.stages.len())));
    }
    let mut outputs = Vec::with_capacity(stages.len());
    let mut cur = x.clone();
    for (s, (stage, sp)) in stages.iter().zip(&plan.stages).enumerate() {
        for (l, layer) in stage.layers.iter().enumerate() {
            let rb = if l == 0 { &sp.down } else { &sp.subm };
            cur = layer.forward(&cur, rb)?;
            let name = layer_name(s, l);
            rec.nodes(layer.nodes(&name), cur.len());
            rec.observe(&name, &cur);
        }
        outputs.push(cur.clone());
    }
    Ok(outputs)
}

/// Runs all stages; returns the outputs of stages 2, 3 and 4.
pub fn run_backbone(x: &RealTensor, stages: &[Stage]) -> Result<(RealTensor, RealTensor, RealTensor)> {
    check_input(x, stages)?;
    let plan = ActivePlan::build(x.active(), stages.len())?;
    let mut out = run_backbone_with(x, stages, &plan, &mut Recorder::silent())?;
    if out.len() != 4 {
        return Err(Error::Structure(format!("{} stages, expected 4", out.len())));
    }
    let s4 = out.pop().unwrap();
    let s3 = out.pop().unwrap();
    let s2 = out.pop().unwrap();
    Ok((s2, s3, s4))
}

fn fuse_scales_with(
    s2: &RealTensor,
    s3: &RealTensor,
    s4: &RealTensor,
    align: &FusedConvLayer,
    pointwise: &Rulebook,
    rec: &mut Recorder,
) -> Result<RealTensor> {
    let aligned = align.apply_with(s2, pointwise, false)?;
    rec.nodes(vec![align_node(align.cin(), align.cout())], aligned.len());
    rec.observe("align", &aligned);
    let f1 = sparse_add_projected(&aligned, s3, 2)?;
    rec.nodes(vec![fusion_node(1)], f1.len());
    rec.observe("fuse1", &f1);
    let f2 = sparse_add_projected(&f1, s4, 4)?;
    rec.nodes(vec![fusion_node(2)], f2.len());
    rec.observe("fuse2", &f2);
    Ok(f2)
}

/// Aligns `s2` with a 1x1 submanifold layer, then adds `s3` and `s4`
/// projected onto its sites.
pub fn fuse_scales(s2: &RealTensor, s3: &RealTensor, s4: &RealTensor, align: &FusedConvLayer) -> Result<RealTensor> {
    let pointwise = Rulebook::submanifold(s2.active(), 1)?;
    fuse_scales_with(s2, s3, s4, align, &pointwise, &mut Recorder::silent())
}

fn run_branch(
    x: &RealTensor,
    branch: &HeadBranch,
    name: &str,
    subm: &Rulebook,
    pointwise: &Rulebook,
    rec: &mut Recorder,
) -> Result<RealTensor> {
    let nodes = branch.nodes(name);
    let h = branch.conv.apply_with(x, subm, true)?;
    rec.trace.push(TraceEvent { node: nodes[0].clone(), active: h.len() });
    rec.observe(&nodes[0].name, &h);
    let y = branch.out.apply_with(&h, pointwise, false)?;
    rec.trace.push(TraceEvent { node: nodes[1].clone(), active: y.len() });
    rec.observe(&nodes[1].name, &y);
    Ok(y)
}

fn run_head_with(
    x: &RealTensor,
    heatmap: &HeadBranch,
    regression: &HeadBranch,
    subm: &Rulebook,
    pointwise: &Rulebook,
    rec: &mut Recorder,
) -> Result<(RealTensor, RealTensor)> {
    let hm = run_branch(x, heatmap, "head.heatmap", subm, pointwise, rec)?;
    let reg = run_branch(x, regression, "head.regression", subm, pointwise, rec)?;
    Ok((hm, reg))
}

/// Class logits and regression maps on the sites of `x`.
pub fn run_head(x: &RealTensor, heatmap: &HeadBranch, regression: &HeadBranch) -> Result<(RealTensor, RealTensor)> {
    let subm = Rulebook::submanifold(x.active(), 3)?;
    let pointwise = Rulebook::submanifold(x.active(), 1)?;
    run_head_with(x, heatmap, regression, &subm, &pointwise, &mut Recorder::silent())
}

pub(crate) fn forward_recorded(model: &Model, pillars: &PillarSet, rec: &mut Recorder) -> Result<(RealTensor, RealTensor, Vec<usize>)> {
    let encoded = dbpfn_encode(pillars, &model.encoder)?;
    rec.nodes(vec![GraphNode::new("encoder", OpKind::PillarEncode)], encoded.len());
    rec.observe("encoder", &encoded);
    let plan = ActivePlan::build(&Arc::clone(encoded.active()), model.stages.len())?;
    let outs = run_backbone_with(&encoded, &model.stages, &plan, rec)?;
    let fused = fuse_scales_with(&outs[1], &outs[2], &outs[3], &model.align, &plan.pointwise, rec)?;
    let (hm, reg) = run_head_with(&fused, &model.heatmap, &model.regression, plan.head_subm(), &plan.pointwise, rec)?;
    Ok((hm, reg, plan.stage_active()))
}

/// Real-valued forward pass over a pillarized frame.
pub fn forward_float(model: &Model, pillars: &PillarSet) -> Result<FloatOutput> {
    let mut rec = Recorder::silent();
    let (heatmap, regression, stage_active) = forward_recorded(model, pillars, &mut rec)?;
    Ok(FloatOutput {
        heatmap,
        regression,
        stage_active,
        trace: rec.trace,
    })
}

/// Like [`forward_float`], calling `observer` with every named activation.
pub fn forward_float_observed(model: &Model, pillars: &PillarSet, observer: Observer) -> Result<FloatOutput> {
    let mut rec = Recorder::new(Some(observer));
    let (heatmap, regression, stage_active) = forward_recorded(model, pillars, &mut rec)?;
    Ok(FloatOutput {
        heatmap,
        regression,
        stage_active,
        trace: rec.trace,
    })
}
