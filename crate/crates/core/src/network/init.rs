//! Synthetic weights.
//!
//! Convolution and linear weights are uniform in `[-b, b]` with
//! `b = sqrt(6 / (fan_in + fan_out))`, fans counting kernel taps. Biases,
//! normalization shifts and running means are uniform in `[-0.1, 0.1]`,
//! running variances in `[0.5, 1.5]` and normalization scales in
//! `[0.2, 0.6]`: with three summed branches per layer, larger scales make
//! activations grow by orders of magnitude over the 34 backbone layers.
//! Draws come from ChaCha8 seeded with the given `u64` in a fixed order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::reparam::{BnParams, ConvKind, FusedConvLayer, RepBranch, RepConvLayer, DEFAULT_BN_EPS};
use crate::sparse::ConvKernel;

use super::config::{NetworkConfig, REG_CHANNELS};
use super::dbpfn::DbpfnParams;
use super::io::WeightForm;
use super::model::{ConvLayer, HeadBranch, Model, Stage};

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    uniform(rng, n, -b, b)
}

fn kernel(rng: &mut ChaCha8Rng, size: usize, cin: usize, cout: usize) -> ConvKernel {
    let taps = size * size;
    let data = xavier(rng, taps * cin, taps * cout, taps * cin * cout);
    ConvKernel::new(size, cin, cout, data).expect("generated kernel shape")
}

fn bn(rng: &mut ChaCha8Rng, c: usize) -> BnParams {
    BnParams {
        gamma: uniform(rng, c, 0.2, 0.6),
        beta: uniform(rng, c, -0.1, 0.1),
        running_mean: uniform(rng, c, -0.1, 0.1),
        running_var: uniform(rng, c, 0.5, 1.5),
        eps: DEFAULT_BN_EPS,
    }
}

fn fused(rng: &mut ChaCha8Rng, size: usize, cin: usize, cout: usize) -> FusedConvLayer {
    FusedConvLayer {
        kernel: kernel(rng, size, cin, cout),
        bias: uniform(rng, cout, -0.1, 0.1),
        kind: ConvKind::Submanifold,
    }
}

fn rep_layer(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kind: ConvKind) -> RepConvLayer {
    let conv3x3 = RepBranch { kernel: kernel(rng, 3, cin, cout), bn: bn(rng, cout) };
    let conv1x1 = RepBranch { kernel: kernel(rng, 1, cin, cout), bn: bn(rng, cout) };
    let identity = (kind != ConvKind::Downsample && cin == cout).then(|| bn(rng, cout));
    RepConvLayer { conv3x3, conv1x1, identity, kind }
}

/// Training-form model with every branch present.
pub fn random_model(cfg: &NetworkConfig, in_features: usize, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.encoder_hidden();
    let weight = xavier(&mut rng, in_features, h, in_features * h);
    let bias = uniform(&mut rng, h, -0.1, 0.1);
    let norm = cfg.encoder_norm.then(|| bn(&mut rng, h));
    let encoder = DbpfnParams::new(in_features, h, weight, bias, norm)?;
    let stages = (0..cfg.stage_depths.len())
        .map(|s| {
            let (cin, cout) = cfg.stage_io(s);
            let mut layers = vec![ConvLayer::Train(rep_layer(&mut rng, cin, cout, ConvKind::Downsample))];
            for _ in 0..cfg.stage_depths[s] {
                layers.push(ConvLayer::Train(rep_layer(&mut rng, cout, cout, ConvKind::Submanifold)));
            }
            Stage { layers }
        })
        .collect();
    let align = fused(&mut rng, 1, cfg.stage_channels[1], cfg.align_channels);
    let mut branch = |out| HeadBranch {
        conv: fused(&mut rng, 3, cfg.align_channels, cfg.head_channels),
        out: fused(&mut rng, 1, cfg.head_channels, out),
    };
    let heatmap = branch(cfg.num_classes);
    let regression = branch(REG_CHANNELS);
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

/// Random weights in the requested form. The fused form is the fusion of
/// the training form drawn from the same seed.
pub fn generate(cfg: &NetworkConfig, in_features: usize, seed: u64, form: WeightForm) -> Result<Model> {
    let model = random_model(cfg, in_features, seed)?;
    match form {
        WeightForm::Train => Ok(model),
        _ => model.fused(),
    }
}

/// Training-form model whose convolution branches are zero and whose
/// identity branches pass their input through unchanged.
pub fn identity_model(cfg: &NetworkConfig, in_features: usize) -> Result<Model> {
    let mut model = random_model(cfg, in_features, 0)?;
    for stage in &mut model.stages {
        for layer in &mut stage.layers {
            if let ConvLayer::Train(t) = layer {
                let (cin, cout) = (t.cin(), t.cout());
                t.conv3x3.kernel = ConvKernel::zeros(3, cin, cout);
                t.conv1x1.kernel = ConvKernel::zeros(1, cin, cout);
                for b in [&mut t.conv3x3.bn, &mut t.conv1x1.bn] {
                    *b = BnParams::identity(cout);
                }
                if t.identity.is_some() {
                    t.identity = Some(BnParams::identity(cout));
                }
            }
        }
    }
    Ok(model)
}
