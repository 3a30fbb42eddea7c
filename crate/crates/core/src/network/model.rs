use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::reparam::{apply_training_form_with, fuse, ConvKind, FusedConvLayer, RepConvLayer};
use crate::sparse::{ActiveSet, Coord, RealTensor, Rulebook, SparseTensor2D};

use super::config::{NetworkConfig, REG_CHANNELS};
use super::dbpfn::DbpfnParams;
use super::graph::{align_node, fusion_node, GraphNode, OpKind};

/// A backbone layer in either of its two forms.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer {
    Train(RepConvLayer),
    Fused(FusedConvLayer),
}

impl ConvLayer {
    pub fn kind(&self) -> ConvKind {
        match self {
            ConvLayer::Train(l) => l.kind,
            ConvLayer::Fused(l) => l.kind,
        }
    }

    pub fn cin(&self) -> usize {
        match self {
            ConvLayer::Train(l) => l.cin(),
            ConvLayer::Fused(l) => l.cin(),
        }
    }

    pub fn cout(&self) -> usize {
        match self {
            ConvLayer::Train(l) => l.cout(),
            ConvLayer::Fused(l) => l.cout(),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, ConvLayer::Fused(_))
    }

    pub fn fused(&self) -> Result<FusedConvLayer> {
        match self {
            ConvLayer::Train(l) => fuse(l),
            ConvLayer::Fused(l) => Ok(l.clone()),
        }
    }

    /// Output followed by ReLU.
    pub fn forward(&self, x: &RealTensor, rb: &Rulebook) -> Result<RealTensor> {
        match self {
            ConvLayer::Train(l) => Ok(crate::sparse::relu(&apply_training_form_with(l, x, rb)?)),
            ConvLayer::Fused(l) => l.apply_with(x, rb, true),
        }
    }

    pub fn nodes(&self, name: &str) -> Vec<GraphNode> {
        let conv = |kernel, relu| OpKind::Conv {
            kind: self.kind(),
            kernel,
            cin: self.cin(),
            cout: self.cout(),
            relu,
        };
        match self {
            ConvLayer::Fused(_) => vec![GraphNode::new(name, conv(3, true))],
            ConvLayer::Train(l) => {
                let mut nodes = vec![
                    GraphNode::new(format!("{name}.conv3x3"), conv(3, false)),
                    GraphNode::new(format!("{name}.conv1x1"), conv(1, false)),
                    GraphNode::new(format!("{name}.sum"), OpKind::BranchSum),
                ];
                if l.identity.is_some() {
                    nodes.push(GraphNode::new(format!("{name}.identity"), OpKind::ResidualAdd { factor: 1 }));
                }
                nodes.push(GraphNode::new(format!("{name}.relu"), OpKind::Relu));
                nodes
            }
        }
    }
}

/// Layer 0 is the stride-2 downsampler, the rest are submanifold layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub layers: Vec<ConvLayer>,
}

/// 3x3 submanifold convolution with ReLU, then a 1x1 submanifold projection.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBranch {
    pub conv: FusedConvLayer,
    pub out: FusedConvLayer,
}

impl HeadBranch {
    pub fn nodes(&self, name: &str) -> Vec<GraphNode> {
        let conv = |l: &FusedConvLayer, kernel, relu| OpKind::Conv {
            kind: ConvKind::Submanifold,
            kernel,
            cin: l.cin(),
            cout: l.cout(),
            relu,
        };
        vec![
            GraphNode::new(format!("{name}.conv"), conv(&self.conv, 3, true)),
            GraphNode::new(format!("{name}.out"), conv(&self.out, 1, false)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub encoder: DbpfnParams,
    pub stages: Vec<Stage>,
    /// 1x1 submanifold projection of the stage-2 output, no activation.
    pub align: FusedConvLayer,
    pub heatmap: HeadBranch,
    pub regression: HeadBranch,
}

pub fn layer_name(stage: usize, layer: usize) -> String {
    format!("stage{}.layer{}", stage + 1, layer)
}

fn expect_shape(name: &str, got: (usize, usize, usize), want: (usize, usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Structure(format!(
            "{name}: {}x{} kernel {}->{}, expected {}x{} kernel {}->{}",
            got.0, got.0, got.1, got.2, want.0, want.0, want.1, want.2
        )));
    }
    Ok(())
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.encoder.out_channels() != cfg.encoder_out {
            return Err(Error::Structure(format!(
                "encoder width {} but config expects {}",
                self.encoder.out_channels(),
                cfg.encoder_out
            )));
        }
        if self.stages.len() != cfg.stage_depths.len() {
            return Err(Error::Structure(format!("{} stages, config has {}", self.stages.len(), cfg.stage_depths.len())));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.layers.len() != cfg.stage_depths[s] + 1 {
                return Err(Error::Structure(format!(
                    "stage {} has {} layers, expected downsampler + {}",
                    s + 1,
                    stage.layers.len(),
                    cfg.stage_depths[s]
                )));
            }
            let (cin, cout) = cfg.stage_io(s);
            for (l, layer) in stage.layers.iter().enumerate() {
                let name = layer_name(s, l);
                let (want_kind, want_cin) = if l == 0 {
                    (ConvKind::Downsample, cin)
                } else {
                    (ConvKind::Submanifold, cout)
                };
                if layer.kind() != want_kind {
                    return Err(Error::Structure(format!("{name} is {}, expected {}", layer.kind().name(), want_kind.name())));
                }
                expect_shape(&name, (3, layer.cin(), layer.cout()), (3, want_cin, cout))?;
                if let ConvLayer::Train(t) = layer {
                    t.validate()?;
                }
            }
        }
        let k = |l: &FusedConvLayer| (l.kernel.size, l.cin(), l.cout());
        expect_shape("align", k(&self.align), (1, cfg.stage_channels[1], cfg.align_channels))?;
        for (name, branch, out) in [
            ("head.heatmap", &self.heatmap, cfg.num_classes),
            ("head.regression", &self.regression, REG_CHANNELS),
        ] {
            expect_shape(&format!("{name}.conv"), k(&branch.conv), (3, cfg.align_channels, cfg.head_channels))?;
            expect_shape(&format!("{name}.out"), k(&branch.out), (1, cfg.head_channels, out))?;
        }
        let fixed = [
            &self.align,
            &self.heatmap.conv,
            &self.heatmap.out,
            &self.regression.conv,
            &self.regression.out,
        ];
        if fixed.iter().any(|l| l.kind != ConvKind::Submanifold || l.bias.len() != l.cout()) {
            return Err(Error::Structure("alignment and head layers must be submanifold with full bias".into()));
        }
        Ok(())
    }

    pub fn is_fused(&self) -> bool {
        self.encoder.bn.is_none() && self.stages.iter().all(|s| s.layers.iter().all(ConvLayer::is_fused))
    }

    pub fn has_branches(&self) -> bool {
        self.stages.iter().any(|s| s.layers.iter().any(|l| !l.is_fused()))
    }

    /// Inference form: every layer merged into one 3x3 kernel and the
    /// encoder normalization folded into its linear map.
    pub fn fused(&self) -> Result<Model> {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                Ok(Stage {
                    layers: s
                        .layers
                        .iter()
                        .map(|l| l.fused().map(ConvLayer::Fused))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            config: self.config.clone(),
            encoder: self.encoder.folded(),
            stages,
            align: self.align.clone(),
            heatmap: self.heatmap.clone(),
            regression: self.regression.clone(),
        })
    }

    /// Static description of the computation, in execution order.
    pub fn graph(&self) -> Vec<GraphNode> {
        let mut nodes = vec![GraphNode::new("encoder", OpKind::PillarEncode)];
        for (s, stage) in self.stages.iter().enumerate() {
            for (l, layer) in stage.layers.iter().enumerate() {
                nodes.extend(layer.nodes(&layer_name(s, l)));
            }
        }
        nodes.push(align_node(self.align.cin(), self.align.cout()));
        nodes.push(fusion_node(1));
        nodes.push(fusion_node(2));
        nodes.extend(self.heatmap.nodes("head.heatmap"));
        nodes.extend(self.regression.nodes("head.regression"));
        nodes
    }

    /// Largest relative deviation between the training form and the fused
    /// form of each branched layer, over `probes` random sparse inputs per
    /// layer. Zero for an already fused model.
    pub fn fusion_deviation(&self, probes: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0f64;
        for stage in &self.stages {
            for layer in &stage.layers {
                let ConvLayer::Train(t) = layer else { continue };
                let fused = fuse(t)?;
                for _ in 0..probes {
                    let x = random_sparse(&mut rng, 16, 16, t.cin());
                    let rb = t.kind.rulebook(x.active())?;
                    let a = apply_training_form_with(t, &x, &rb)?;
                    let b = fused.apply_with(&x, &rb, false)?;
                    worst = worst.max(relative_deviation(a.data(), b.data()));
                }
            }
        }
        Ok(worst)
    }
}

/// `max|a - b| / max|a|`; the absolute deviation when `a` is all zero.
pub fn relative_deviation(reference: &[f32], other: &[f32]) -> f64 {
    assert_eq!(reference.len(), other.len());
    let mut diff = 0f64;
    let mut norm = 0f64;
    for (&a, &b) in reference.iter().zip(other) {
        diff = diff.max((a as f64 - b as f64).abs());
        norm = norm.max((a as f64).abs());
    }
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

/// Random tensor with roughly 30% of sites active and values in [-1, 1].
pub fn random_sparse(rng: &mut impl Rng, width: u32, height: u32, channels: usize) -> RealTensor {
    let coords: Vec<Coord> = (0..height)
        .flat_map(|j| (0..width).map(move |i| Coord::new(i, j)))
        .filter(|_| rng.gen_bool(0.3))
        .collect();
    let active = std::sync::Arc::new(ActiveSet::from_sorted(width, height, coords).expect("sorted coords"));
    let data = (0..active.len() * channels).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    SparseTensor2D::new(active, channels, data).expect("consistent shape")
}
