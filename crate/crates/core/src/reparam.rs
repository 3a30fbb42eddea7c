//! Three-branch reparameterizable convolutions.
//!
//! During training a layer sums a 3x3 conv, a 1x1 conv and (when shapes
//! allow) an identity path, each followed by batch normalization. Because
//! every branch is linear in the input, the three can be folded into one 3x3
//! kernel and bias, removing the per-layer skip connection at inference.

use crate::error::{Error, Result};
use crate::sparse::{conv_real, ConvKernel, RealTensor, Rulebook, NO_INPUT};

pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    /// Normalization that leaves its input unchanged: `var + eps == 1`.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0 - DEFAULT_BN_EPS; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Shape("batch-norm parameter lengths differ".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Param(format!("batch-norm epsilon {} must be positive", self.eps)));
        }
        if let Some(v) = self.running_var.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Param(format!("negative running variance {v}")));
        }
        Ok(())
    }

    /// Multiplier `gamma / sqrt(var + eps)` for channel `c`.
    pub fn scale(&self, c: usize) -> f32 {
        self.gamma[c] / (self.running_var[c] + self.eps).sqrt()
    }

    /// Normalizes one value of channel `c` in its unfolded form.
    pub fn apply(&self, c: usize, x: f32) -> f32 {
        self.gamma[c] * (x - self.running_mean[c]) / (self.running_var[c] + self.eps).sqrt() + self.beta[c]
    }
}

/// Folds normalization into the preceding convolution.
pub fn fold_bn(kernel: &ConvKernel, bn: &BnParams) -> Result<(ConvKernel, Vec<f32>)> {
    bn.validate()?;
    if bn.channels() != kernel.cout {
        return Err(Error::Shape(format!(
            "{} normalization channels for {} outputs",
            bn.channels(),
            kernel.cout
        )));
    }
    let scales: Vec<f32> = (0..kernel.cout).map(|c| bn.scale(c)).collect();
    let mut out = kernel.clone();
    for row in out.data.chunks_exact_mut(kernel.cout) {
        for (w, s) in row.iter_mut().zip(&scales) {
            *w *= s;
        }
    }
    let bias = (0..kernel.cout)
        .map(|c| bn.beta[c] - bn.running_mean[c] * scales[c])
        .collect();
    Ok((out, bias))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Stride 1, output sites equal input sites.
    Submanifold,
    /// Stride 1, output dilates to every site a tap reaches.
    Sparse,
    /// 3x3, stride 2, padding 1.
    Downsample,
}

impl ConvKind {
    pub fn stride(self) -> u32 {
        match self {
            ConvKind::Downsample => 2,
            _ => 1,
        }
    }

    pub fn rulebook(self, input: &std::sync::Arc<crate::sparse::ActiveSet>) -> Result<Rulebook> {
        match self {
            ConvKind::Submanifold => Rulebook::submanifold(input, 3),
            ConvKind::Sparse => Rulebook::regular(input, 3),
            ConvKind::Downsample => Rulebook::downsample(input),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Submanifold => "submanifold",
            ConvKind::Sparse => "sparse",
            ConvKind::Downsample => "downsample",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepBranch {
    pub kernel: ConvKernel,
    pub bn: BnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepConvLayer {
    pub conv3x3: RepBranch,
    pub conv1x1: RepBranch,
    pub identity: Option<BnParams>,
    pub kind: ConvKind,
}

impl RepConvLayer {
    pub fn cin(&self) -> usize {
        self.conv3x3.kernel.cin
    }

    pub fn cout(&self) -> usize {
        self.conv3x3.kernel.cout
    }

    pub fn validate(&self) -> Result<()> {
        let (k3, k1) = (&self.conv3x3.kernel, &self.conv1x1.kernel);
        if k3.size != 3 || k1.size != 1 {
            return Err(Error::Structure(format!(
                "branch kernels must be 3x3 and 1x1, got {}x{} and {}x{}",
                k3.size, k3.size, k1.size, k1.size
            )));
        }
        if (k3.cin, k3.cout) != (k1.cin, k1.cout) {
            return Err(Error::Structure(format!(
                "3x3 branch maps {}->{} but 1x1 branch maps {}->{}",
                k3.cin, k3.cout, k1.cin, k1.cout
            )));
        }
        self.conv3x3.bn.validate()?;
        self.conv1x1.bn.validate()?;
        if let Some(bn) = &self.identity {
            if k3.cin != k3.cout {
                return Err(Error::Structure(format!(
                    "identity branch needs equal channels, got {}->{}",
                    k3.cin, k3.cout
                )));
            }
            if self.kind == ConvKind::Downsample {
                return Err(Error::Structure("downsampling layers cannot carry an identity branch".into()));
            }
            bn.validate()?;
            if bn.channels() != k3.cout {
                return Err(Error::Shape("identity normalization width differs from layer width".into()));
            }
        }
        Ok(())
    }
}

/// Single-kernel inference form of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConvLayer {
    pub kernel: ConvKernel,
    pub bias: Vec<f32>,
    pub kind: ConvKind,
}

impl FusedConvLayer {
    pub fn cin(&self) -> usize {
        self.kernel.cin
    }

    pub fn cout(&self) -> usize {
        self.kernel.cout
    }

    /// Pre-activation output over a prepared rulebook.
    pub fn apply_with(&self, x: &RealTensor, rb: &Rulebook, relu: bool) -> Result<RealTensor> {
        conv_real(x, rb, &self.kernel, &self.bias, relu)
    }

    pub fn apply(&self, x: &RealTensor) -> Result<RealTensor> {
        let rb = self.kind.rulebook(x.active())?;
        self.apply_with(x, &rb, false)
    }
}

pub fn fuse(layer: &RepConvLayer) -> Result<FusedConvLayer> {
    layer.validate()?;
    let (k3, b3) = fold_bn(&layer.conv3x3.kernel, &layer.conv3x3.bn)?;
    let (k1, b1) = fold_bn(&layer.conv1x1.kernel, &layer.conv1x1.bn)?;
    let k1 = k1.pad_to(3)?;
    let mut kernel = k3;
    for (a, b) in kernel.data.iter_mut().zip(&k1.data) {
        *a += b;
    }
    let mut bias: Vec<f32> = b3.iter().zip(&b1).map(|(a, b)| a + b).collect();
    if let Some(bn) = &layer.identity {
        let (ki, bi) = fold_bn(&ConvKernel::identity(3, layer.cin()), bn)?;
        for (a, b) in kernel.data.iter_mut().zip(&ki.data) {
            *a += b;
        }
        for (a, b) in bias.iter_mut().zip(&bi) {
            *a += b;
        }
    }
    Ok(FusedConvLayer {
        kernel,
        bias,
        kind: layer.kind,
    })
}

/// Training-form output over a prepared rulebook: the sum of the three
/// normalized branches, before activation. All branches share the 3x3
/// branch's output sites; the 1x1 and identity paths read the center tap.
pub fn apply_training_form_with(layer: &RepConvLayer, x: &RealTensor, rb: &Rulebook) -> Result<RealTensor> {
    layer.validate()?;
    let cout = layer.cout();
    let zero = vec![0.0; cout];
    let y3 = conv_real(x, rb, &layer.conv3x3.kernel, &zero, false)?;
    let y1 = conv_real(x, rb, &layer.conv1x1.kernel, &zero, false)?;
    let center = (rb.kernel() * rb.kernel()) / 2;
    let mut out = Vec::with_capacity(y3.data().len());
    for o in 0..y3.len() {
        let (f3, f1) = (y3.feature(o), y1.feature(o));
        let src = rb.taps(o)[center];
        for c in 0..cout {
            let mut v = layer.conv3x3.bn.apply(c, f3[c]) + layer.conv1x1.bn.apply(c, f1[c]);
            if let Some(bn) = &layer.identity {
                let xin = if src == NO_INPUT { 0.0 } else { x.feature(src as usize)[c] };
                v += bn.apply(c, xin);
            }
            out.push(v);
        }
    }
    y3.with_data(cout, out)
}

pub fn apply_training_form(layer: &RepConvLayer, x: &RealTensor) -> Result<RealTensor> {
    let rb = layer.kind.rulebook(x.active())?;
    apply_training_form_with(layer, x, &rb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{Coord, SparseTensor2D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(rng: &mut impl Rng, size: usize, cin: usize, cout: usize) -> ConvKernel {
        let data = (0..size * size * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvKernel::new(size, cin, cout, data).unwrap()
    }

    fn random_bn(rng: &mut impl Rng, c: usize) -> BnParams {
        BnParams {
            gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            running_mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            running_var: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
            eps: DEFAULT_BN_EPS,
        }
    }

    fn random_input(rng: &mut impl Rng, w: u32, h: u32, c: usize, occ: f64) -> RealTensor {
        let mut entries = Vec::new();
        for j in 0..h {
            for i in 0..w {
                if rng.gen_bool(occ) {
                    entries.push((Coord::new(i, j), (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()));
                }
            }
        }
        SparseTensor2D::from_entries(w, h, c, entries).unwrap()
    }

    fn max_rel(a: &RealTensor, b: &RealTensor) -> f64 {
        assert_eq!(a.coords(), b.coords());
        let scale = b.data().iter().fold(0f64, |m, v| m.max(v.abs() as f64));
        let diff = a.data().iter().zip(b.data()).fold(0f64, |m, (x, y)| m.max((x - y).abs() as f64));
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn fold_identity_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernel(&mut rng, 3, 2, 3);
        let (k2, b) = fold_bn(&k, &BnParams::identity(3)).unwrap();
        assert_eq!(k2, k);
        assert_eq!(b, vec![0.0; 3]);
    }

    #[test]
    fn fold_worked_example() {
        let k = ConvKernel::new(1, 1, 1, vec![0.75]).unwrap();
        let bn = BnParams {
            gamma: vec![2.0],
            beta: vec![3.0],
            running_mean: vec![1.0],
            running_var: vec![1.0 - DEFAULT_BN_EPS],
            eps: DEFAULT_BN_EPS,
        };
        let (k2, b) = fold_bn(&k, &bn).unwrap();
        assert_eq!(k2.data, vec![1.5]);
        assert_eq!(b, vec![1.0]);
    }

    #[test]
    fn folded_conv_matches_conv_then_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let k = random_kernel(&mut rng, 3, 4, 5);
            let bn = random_bn(&mut rng, 5);
            let x = random_input(&mut rng, 10, 10, 4, 0.4);
            let raw = crate::sparse::submanifold_conv(&x, &k, &[0.0; 5]).unwrap();
            let expect = raw.with_data(5, raw.iter().flat_map(|(_, f)| f.iter().enumerate().map(|(c, &v)| bn.apply(c, v)).collect::<Vec<_>>()).collect()).unwrap();
            let (kf, bf) = fold_bn(&k, &bn).unwrap();
            let got = crate::sparse::submanifold_conv(&x, &kf, &bf).unwrap();
            assert!(max_rel(&got, &expect) <= 1e-5);
        }
    }

    #[test]
    fn bn_validation() {
        let mut bn = BnParams::identity(2);
        bn.running_var[1] = -0.1;
        assert!(bn.validate().is_err());
        let mut bn = BnParams::identity(2);
        bn.eps = 0.0;
        assert!(bn.validate().is_err());
    }

    #[test]
    fn identity_only_layer_fuses_to_identity() {
        let layer = RepConvLayer {
            conv3x3: RepBranch { kernel: ConvKernel::zeros(3, 4, 4), bn: BnParams::identity(4) },
            conv1x1: RepBranch { kernel: ConvKernel::zeros(1, 4, 4), bn: BnParams::identity(4) },
            identity: Some(BnParams::identity(4)),
            kind: ConvKind::Submanifold,
        };
        let fused = fuse(&layer).unwrap();
        assert_eq!(fused.kernel, ConvKernel::identity(3, 4));
        assert_eq!(fused.bias, vec![0.0; 4]);
        let x = SparseTensor2D::from_entries(5, 5, 4, vec![(Coord::new(2, 3), vec![1.0, -2.0, 0.5, 3.0])]).unwrap();
        assert_eq!(apply_training_form(&layer, &x).unwrap(), x);
        assert_eq!(fused.apply(&x).unwrap(), x);
    }

    #[test]
    fn no_identity_zero_1x1_equals_folded_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k3 = random_kernel(&mut rng, 3, 3, 2);
        let bn3 = random_bn(&mut rng, 2);
        let layer = RepConvLayer {
            conv3x3: RepBranch { kernel: k3.clone(), bn: bn3.clone() },
            conv1x1: RepBranch { kernel: ConvKernel::zeros(1, 3, 2), bn: BnParams::identity(2) },
            identity: None,
            kind: ConvKind::Downsample,
        };
        let fused = fuse(&layer).unwrap();
        let (kf, bf) = fold_bn(&k3, &bn3).unwrap();
        assert_eq!(fused.kernel, kf);
        assert_eq!(fused.bias, bf);
    }

    #[test]
    fn structural_errors() {
        let mut layer = RepConvLayer {
            conv3x3: RepBranch { kernel: ConvKernel::zeros(3, 2, 3), bn: BnParams::identity(3) },
            conv1x1: RepBranch { kernel: ConvKernel::zeros(1, 2, 3), bn: BnParams::identity(3) },
            identity: Some(BnParams::identity(3)),
            kind: ConvKind::Submanifold,
        };
        assert!(matches!(fuse(&layer), Err(Error::Structure(_))));
        layer.identity = None;
        assert!(fuse(&layer).is_ok());
        layer.conv1x1.kernel = ConvKernel::zeros(3, 2, 3);
        assert!(matches!(fuse(&layer), Err(Error::Structure(_))));
    }

    #[test]
    fn training_form_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = RepConvLayer {
            conv3x3: RepBranch { kernel: random_kernel(&mut rng, 3, 2, 2), bn: random_bn(&mut rng, 2) },
            conv1x1: RepBranch { kernel: random_kernel(&mut rng, 1, 2, 2), bn: random_bn(&mut rng, 2) },
            identity: Some(random_bn(&mut rng, 2)),
            kind: ConvKind::Submanifold,
        };
        assert!(apply_training_form(&layer, &RealTensor::empty(6, 6, 2)).unwrap().is_empty());
    }

    #[test]
    fn fused_matches_training_form_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [ConvKind::Submanifold, ConvKind::Sparse, ConvKind::Downsample] {
            for _ in 0..30 {
                let cin = rng.gen_range(1..8);
                let cout = if kind == ConvKind::Downsample { rng.gen_range(1..8) } else { cin };
                let layer = RepConvLayer {
                    conv3x3: RepBranch { kernel: random_kernel(&mut rng, 3, cin, cout), bn: random_bn(&mut rng, cout) },
                    conv1x1: RepBranch { kernel: random_kernel(&mut rng, 1, cin, cout), bn: random_bn(&mut rng, cout) },
                    identity: (kind != ConvKind::Downsample).then(|| random_bn(&mut rng, cout)),
                    kind,
                };
                let x = random_input(&mut rng, 12, 9, cin, 0.3);
                let train = apply_training_form(&layer, &x).unwrap();
                let fused = fuse(&layer).unwrap().apply(&x).unwrap();
                assert!(max_rel(&fused, &train) <= 1e-4, "{kind:?}");
            }
        }
    }
}
