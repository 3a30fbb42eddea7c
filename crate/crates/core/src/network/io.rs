//! Mapping between models and weight files.
//!
//! Backbone tensors are named `stage{S}.layer{L}.{branch}.{param}` with
//! branches `conv3x3`, `conv1x1`, `identity` (training form) or `fused`.
//! Normalization parameters are `gamma`, `beta`, `mean`, `var`; the epsilon
//! is fixed and not stored. INT8 files add activation parameters as empty
//! i8 tensors `{layer}.act` whose quantization block carries the values.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::reparam::{BnParams, ConvKind, FusedConvLayer, RepBranch, RepConvLayer, DEFAULT_BN_EPS};
use crate::sparse::{ConvKernel, QuantConv};
use crate::weights::{QuantBlock, Tensor, TensorData, WeightFile};

use super::config::{NetworkConfig, REG_CHANNELS};
use super::dbpfn::{DbpfnParams, QuantEncoder};
use super::model::{layer_name, ConvLayer, HeadBranch, Model, Stage};
use super::quantized::{QuantHeadBranch, QuantModel, QuantStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightForm {
    Train,
    Fused,
    Int8,
}

impl WeightForm {
    pub fn name(self) -> &'static str {
        match self {
            WeightForm::Train => "train",
            WeightForm::Fused => "fused",
            WeightForm::Int8 => "int8",
        }
    }
}

pub fn detect_form(file: &WeightFile) -> Result<WeightForm> {
    match &file.require("encoder.linear.weight")?.data {
        TensorData::I8 { .. } => Ok(WeightForm::Int8),
        TensorData::F32(_) => {
            if file.tensors().iter().any(|t| t.name.contains(".conv3x3.")) {
                Ok(WeightForm::Train)
            } else {
                Ok(WeightForm::Fused)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum LoadedWeights {
    Float(Model),
    Int8(QuantModel),
}

fn u(v: usize) -> u32 {
    v as u32
}

fn kdims(size: usize, cin: usize, cout: usize) -> Vec<u32> {
    vec![u(size), u(size), u(cin), u(cout)]
}

const BN_PARAMS: [&str; 4] = ["gamma", "beta", "mean", "var"];

struct Writer(WeightFile);

impl Writer {
    fn f32(&mut self, name: String, dims: Vec<u32>, data: &[f32]) -> Result<()> {
        self.0.push(Tensor::f32(name, dims, data.to_vec()))
    }

    fn bn(&mut self, prefix: &str, bn: &BnParams) -> Result<()> {
        let c = vec![u(bn.channels())];
        for (p, v) in BN_PARAMS.iter().zip([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]) {
            self.f32(format!("{prefix}.{p}"), c.clone(), v)?;
        }
        Ok(())
    }

    fn kernel(&mut self, name: String, k: &ConvKernel) -> Result<()> {
        self.f32(name, kdims(k.size, k.cin, k.cout), &k.data)
    }

    fn fused(&mut self, prefix: &str, l: &FusedConvLayer) -> Result<()> {
        self.kernel(format!("{prefix}.weight"), &l.kernel)?;
        self.f32(format!("{prefix}.bias"), vec![u(l.cout())], &l.bias)
    }

    fn act(&mut self, name: &str, qp: QuantParams) -> Result<()> {
        self.0.push(Tensor::i8(format!("{name}.act"), vec![0], vec![], QuantBlock::PerTensor(qp)))
    }

    fn qconv(&mut self, prefix: &str, act: &str, c: &QuantConv) -> Result<()> {
        self.0.push(Tensor::i8(
            format!("{prefix}.weight"),
            kdims(c.size, c.cin, c.cout),
            c.weight.clone(),
            QuantBlock::PerChannel {
                axis: 3,
                scales: c.weight_scales.clone(),
                zero_points: vec![0; c.cout],
            },
        ))?;
        self.f32(format!("{prefix}.bias"), vec![u(c.cout)], &c.bias_real)?;
        self.act(act, c.output)
    }
}

pub fn model_to_file(model: &Model) -> Result<WeightFile> {
    let mut w = Writer(WeightFile::new());
    let e = &model.encoder;
    w.f32("encoder.linear.weight".into(), vec![u(e.in_features), u(e.hidden)], &e.weight)?;
    w.f32("encoder.linear.bias".into(), vec![u(e.hidden)], &e.bias)?;
    if let Some(bn) = &e.bn {
        w.bn("encoder.bn", bn)?;
    }
    for (s, stage) in model.stages.iter().enumerate() {
        for (l, layer) in stage.layers.iter().enumerate() {
            let name = layer_name(s, l);
            match layer {
                ConvLayer::Fused(f) => w.fused(&format!("{name}.fused"), f)?,
                ConvLayer::Train(t) => {
                    w.kernel(format!("{name}.conv3x3.weight"), &t.conv3x3.kernel)?;
                    w.bn(&format!("{name}.conv3x3"), &t.conv3x3.bn)?;
                    w.kernel(format!("{name}.conv1x1.weight"), &t.conv1x1.kernel)?;
                    w.bn(&format!("{name}.conv1x1"), &t.conv1x1.bn)?;
                    if let Some(bn) = &t.identity {
                        w.bn(&format!("{name}.identity"), bn)?;
                    }
                }
            }
        }
    }
    w.fused("align", &model.align)?;
    for (name, b) in [("head.heatmap", &model.heatmap), ("head.regression", &model.regression)] {
        w.fused(&format!("{name}.conv"), &b.conv)?;
        w.fused(&format!("{name}.out"), &b.out)?;
    }
    Ok(w.0)
}

pub fn quant_to_file(model: &QuantModel) -> Result<WeightFile> {
    let mut w = Writer(WeightFile::new());
    let e = &model.encoder;
    w.0.push(Tensor::i8(
        "input.act",
        vec![u(e.in_features()), 0],
        vec![],
        QuantBlock::PerChannel {
            axis: 0,
            scales: e.input.iter().map(|q| q.scale).collect(),
            zero_points: e.input.iter().map(|q| q.zero_point).collect(),
        },
    ))?;
    w.0.push(Tensor::i8(
        "encoder.linear.weight",
        vec![u(e.in_features()), u(e.hidden)],
        e.weight.clone(),
        QuantBlock::PerChannel {
            axis: 1,
            scales: e.weight_scales.clone(),
            zero_points: vec![0; e.hidden],
        },
    ))?;
    w.f32("encoder.linear.bias".into(), vec![u(e.hidden)], &e.bias_real)?;
    w.act("encoder", e.output)?;
    for (s, stage) in model.stages.iter().enumerate() {
        for (l, c) in stage.layers.iter().enumerate() {
            let name = layer_name(s, l);
            w.qconv(&format!("{name}.fused"), &name, c)?;
        }
    }
    w.qconv("align", "align", &model.align)?;
    w.act("fuse1", model.fuse[0])?;
    w.act("fuse2", model.fuse[1])?;
    for (name, b) in [("head.heatmap", &model.heatmap), ("head.regression", &model.regression)] {
        let conv = format!("{name}.conv");
        let out = format!("{name}.out");
        w.qconv(&conv, &conv, &b.conv)?;
        w.qconv(&out, &out, &b.out)?;
    }
    Ok(w.0)
}

/// Reads tensors by name and remembers which were consumed, so leftovers
/// can be reported.
struct Loader<'a> {
    file: &'a WeightFile,
    used: HashSet<&'a str>,
}

impl<'a> Loader<'a> {
    fn new(file: &'a WeightFile) -> Self {
        Self { file, used: HashSet::new() }
    }

    fn mark(&mut self, name: &str) {
        if let Some(t) = self.file.get(name) {
            self.used.insert(t.name.as_str());
        }
    }

    fn has(&self, name: &str) -> bool {
        self.file.contains(name)
    }

    fn f32(&mut self, name: &str, dims: &[u32]) -> Result<Vec<f32>> {
        let v = self.file.f32(name, dims)?.to_vec();
        self.mark(name);
        Ok(v)
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<BnParams> {
        let mut v: Vec<Vec<f32>> = Vec::with_capacity(4);
        for p in BN_PARAMS {
            v.push(self.f32(&format!("{prefix}.{p}"), &[u(c)])?);
        }
        let bn = BnParams {
            running_var: v.pop().unwrap(),
            running_mean: v.pop().unwrap(),
            beta: v.pop().unwrap(),
            gamma: v.pop().unwrap(),
            eps: DEFAULT_BN_EPS,
        };
        bn.validate().map_err(|e| Error::tensor(format!("{prefix}.var"), e.to_string()))?;
        Ok(bn)
    }

    fn kernel(&mut self, name: &str, size: usize, cin: usize, cout: usize) -> Result<ConvKernel> {
        let data = self.f32(name, &kdims(size, cin, cout))?;
        ConvKernel::new(size, cin, cout, data)
    }

    fn fused(&mut self, prefix: &str, size: usize, cin: usize, cout: usize, kind: ConvKind) -> Result<FusedConvLayer> {
        Ok(FusedConvLayer {
            kernel: self.kernel(&format!("{prefix}.weight"), size, cin, cout)?,
            bias: self.f32(&format!("{prefix}.bias"), &[u(cout)])?,
            kind,
        })
    }

    fn act(&mut self, name: &str) -> Result<QuantParams> {
        let name = format!("{name}.act");
        let (_, quant) = self.file.i8(&name, &[0])?;
        self.mark(&name);
        match quant {
            QuantBlock::PerTensor(qp) => Ok(*qp),
            QuantBlock::PerChannel { .. } => Err(Error::tensor(name, "expected per-tensor parameters")),
        }
    }

    fn per_channel(&mut self, name: &str, dims: &[u32], axis: u8) -> Result<(Vec<i8>, Vec<f32>)> {
        let (data, quant) = self.file.i8(name, dims)?;
        self.mark(name);
        match quant {
            QuantBlock::PerChannel { axis: a, scales, zero_points } if *a == axis => {
                if zero_points.iter().any(|&z| z != 0) || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                    return Err(Error::tensor(name, "weights need positive scales and zero offsets"));
                }
                Ok((data.to_vec(), scales.clone()))
            }
            _ => Err(Error::tensor(name, format!("expected per-channel parameters on axis {axis}"))),
        }
    }

    fn qconv(
        &mut self,
        prefix: &str,
        act: &str,
        shape: (usize, usize, usize),
        input: QuantParams,
        relu: bool,
    ) -> Result<QuantConv> {
        let (size, cin, cout) = shape;
        let (weight, scales) = self.per_channel(&format!("{prefix}.weight"), &kdims(size, cin, cout), 3)?;
        let bias = self.f32(&format!("{prefix}.bias"), &[u(cout)])?;
        let output = self.act(act)?;
        QuantConv::from_quantized(size, cin, cout, weight, scales, &bias, input, output, relu)
            .map_err(|e| Error::tensor(format!("{prefix}.weight"), e.to_string()))
    }

    fn finish(self) -> Result<()> {
        match self.file.tensors().iter().find(|t| !self.used.contains(t.name.as_str())) {
            Some(t) => Err(Error::tensor(&t.name, "unexpected tensor for this configuration")),
            None => Ok(()),
        }
    }
}

fn encoder_dims(cfg: &NetworkConfig, in_features: usize) -> Vec<u32> {
    vec![u(in_features), u(cfg.encoder_hidden())]
}

/// Real-valued model in training or fused form (layers may mix).
pub fn model_from_file(file: &WeightFile, cfg: &NetworkConfig, in_features: usize) -> Result<Model> {
    cfg.validate()?;
    let mut ld = Loader::new(file);
    let h = cfg.encoder_hidden();
    let weight = ld.f32("encoder.linear.weight", &encoder_dims(cfg, in_features))?;
    let bias = ld.f32("encoder.linear.bias", &[u(h)])?;
    let bn = if ld.has("encoder.bn.gamma") { Some(ld.bn("encoder.bn", h)?) } else { None };
    let encoder = DbpfnParams::new(in_features, h, weight, bias, bn)?;
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let (cin, cout) = cfg.stage_io(s);
        let mut layers = Vec::with_capacity(cfg.stage_depths[s] + 1);
        for l in 0..=cfg.stage_depths[s] {
            let name = layer_name(s, l);
            let (kind, lin) = if l == 0 { (ConvKind::Downsample, cin) } else { (ConvKind::Submanifold, cout) };
            let fused = format!("{name}.fused");
            let layer = if ld.has(&format!("{fused}.weight")) {
                ConvLayer::Fused(ld.fused(&fused, 3, lin, cout, kind)?)
            } else {
                let k3 = ld.kernel(&format!("{name}.conv3x3.weight"), 3, lin, cout)?;
                let b3 = ld.bn(&format!("{name}.conv3x3"), cout)?;
                let k1 = ld.kernel(&format!("{name}.conv1x1.weight"), 1, lin, cout)?;
                let b1 = ld.bn(&format!("{name}.conv1x1"), cout)?;
                let identity = if ld.has(&format!("{name}.identity.gamma")) {
                    Some(ld.bn(&format!("{name}.identity"), cout)?)
                } else {
                    None
                };
                let t = RepConvLayer {
                    conv3x3: RepBranch { kernel: k3, bn: b3 },
                    conv1x1: RepBranch { kernel: k1, bn: b1 },
                    identity,
                    kind,
                };
                t.validate().map_err(|e| Error::tensor(format!("{name}.identity.gamma"), e.to_string()))?;
                ConvLayer::Train(t)
            };
            layers.push(layer);
        }
        stages.push(Stage { layers });
    }
    let align = ld.fused("align", 1, cfg.stage_channels[1], cfg.align_channels, ConvKind::Submanifold)?;
    let mut branch = |name: &str, out: usize| -> Result<HeadBranch> {
        Ok(HeadBranch {
            conv: ld.fused(&format!("{name}.conv"), 3, cfg.align_channels, cfg.head_channels, ConvKind::Submanifold)?,
            out: ld.fused(&format!("{name}.out"), 1, cfg.head_channels, out, ConvKind::Submanifold)?,
        })
    };
    let heatmap = branch("head.heatmap", cfg.num_classes)?;
    let regression = branch("head.regression", REG_CHANNELS)?;
    ld.finish()?;
    let model = Model {
        config: cfg.clone(),
        encoder,
        stages,
        align,
        heatmap,
        regression,
    };
    model.validate()?;
    Ok(model)
}

pub fn quant_from_file(file: &WeightFile, cfg: &NetworkConfig, in_features: usize) -> Result<QuantModel> {
    cfg.validate()?;
    let mut ld = Loader::new(file);
    let h = cfg.encoder_hidden();
    let (_, input) = ld.file.i8("input.act", &[u(in_features), 0])?;
    ld.mark("input.act");
    let input = match input {
        QuantBlock::PerChannel { axis: 0, scales, zero_points } => scales
            .iter()
            .zip(zero_points)
            .map(|(&s, &z)| QuantParams::new(s, z))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::tensor("input.act", e.to_string()))?,
        _ => return Err(Error::tensor("input.act", "expected per-channel parameters on axis 0")),
    };
    let (weight, scales) = ld.per_channel("encoder.linear.weight", &encoder_dims(cfg, in_features), 1)?;
    let bias = ld.f32("encoder.linear.bias", &[u(h)])?;
    let output = ld.act("encoder")?;
    let encoder = QuantEncoder::from_quantized(input, h, weight, scales, bias, output)?;
    let mut prev = encoder.output;
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let (cin, cout) = cfg.stage_io(s);
        let mut layers = Vec::with_capacity(cfg.stage_depths[s] + 1);
        for l in 0..=cfg.stage_depths[s] {
            let name = layer_name(s, l);
            let lin = if l == 0 { cin } else { cout };
            let c = ld.qconv(&format!("{name}.fused"), &name, (3, lin, cout), prev, true)?;
            prev = c.output;
            layers.push(c);
        }
        stages.push(QuantStage { layers });
    }
    let s2 = stages[1].layers.last().unwrap().output;
    let align = ld.qconv("align", "align", (1, cfg.stage_channels[1], cfg.align_channels), s2, false)?;
    let fuse = [ld.act("fuse1")?, ld.act("fuse2")?];
    let mut branch = |name: &str, out: usize| -> Result<QuantHeadBranch> {
        let conv = format!("{name}.conv");
        let o = format!("{name}.out");
        let c = ld.qconv(&conv, &conv, (3, cfg.align_channels, cfg.head_channels), fuse[1], true)?;
        let y = ld.qconv(&o, &o, (1, cfg.head_channels, out), c.output, false)?;
        Ok(QuantHeadBranch { conv: c, out: y })
    };
    let heatmap = branch("head.heatmap", cfg.num_classes)?;
    let regression = branch("head.regression", REG_CHANNELS)?;
    ld.finish()?;
    let model = QuantModel {
        config: cfg.clone(),
        encoder,
        stages,
        align,
        fuse,
        heatmap,
        regression,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_weights(file: &WeightFile, cfg: &NetworkConfig, in_features: usize) -> Result<LoadedWeights> {
    match detect_form(file)? {
        WeightForm::Int8 => Ok(LoadedWeights::Int8(quant_from_file(file, cfg, in_features)?)),
        _ => Ok(LoadedWeights::Float(model_from_file(file, cfg, in_features)?)),
    }
}
