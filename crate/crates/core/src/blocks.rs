//! Network building blocks: conv+norm+relu stacks, down/up-sampling blocks,
//! skip-connection convolutions, and their initialization.
//!
//! Parameters live in a flat [`ParamSet`] (stable creation order); blocks
//! hold indices into it. Each training forward binds the whole set onto a
//! tape once, so gradients, the optimizer, and checkpoints all share one
//! canonical ordering.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named, ordered collection of trainable tensors.
#[derive(Default, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> usize {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t.with_grad());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of trainable scalars.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a differentiable leaf on the tape,
    /// returning variables aligned with parameter order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// 1-D bilinear interpolation taps for a transposed-conv upsampler:
/// `h[i] = 1 - |(i + 0.5)/factor - k/(2 factor)|`.
pub fn bilinear_taps(k: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || k < factor {
        return Err(Error::InvalidParam(format!(
            "bilinear kernel needs k >= factor >= 1, got k={k}, factor={factor}"
        )));
    }
    let center = k as f64 / (2.0 * factor as f64);
    Ok((0..k)
        .map(|i| 1.0 - ((i as f64 + 0.5) / factor as f64 - center).abs())
        .collect())
}

/// Separable 2-D bilinear kernel `h ⊗ h` of shape `(k, k)`.
pub fn bilinear_kernel(k: usize, factor: usize) -> Result<Tensor> {
    let h = bilinear_taps(k, factor)?;
    Ok(Tensor::from_fn(&[k, k], |i| h[i / k] * h[i % k]))
}

fn kaiming_conv(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Per-channel running statistics for evaluation-mode normalization.
#[derive(Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    fn new(channels: usize) -> Self {
        Self { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], n: usize) {
        // running variance tracks the unbiased batch estimate
        let correction = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * batch_mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * batch_var[c] * correction;
        }
    }
}

/// 3×3 stride-1 pad-1 convolution, batch norm, relu.
#[derive(Clone)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    kernel: usize,
    bias: usize,
    scale: usize,
    shift: usize,
    pub bn_state: BnState,
    pub name: String,
}

impl ConvBlock {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let kernel = ps.add(
            &format!("{prefix}.kernel"),
            kaiming_conv(rng, &[out_channels, in_channels, 3, 3]),
        );
        let bias = ps.add(&format!("{prefix}.bias"), Tensor::zeros(&[out_channels]));
        let scale = ps.add(&format!("{prefix}.bn.scale"), Tensor::full(&[out_channels], 1.0));
        let shift = ps.add(&format!("{prefix}.bn.shift"), Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            bias,
            scale,
            shift,
            bn_state: BnState::new(out_channels),
            name: prefix.to_string(),
        }
    }

    fn check_in(&self, channels: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} input channels, got {channels}",
                self.name, self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        let (b, c, h, w) = tape.value(x).dims4()?;
        self.check_in(c)?;
        let conv = tape.conv2d(x, pv[self.kernel], pv[self.bias], 1, 1)?;
        let (bn, mean, var) = tape.batch_norm_train(conv, pv[self.scale], pv[self.shift], BN_EPS)?;
        self.bn_state.update(&mean, &var, b * h * w);
        Ok(tape.relu(bn))
    }

    pub fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_in(x.dims4()?.1)?;
        let conv = kernels::conv2d_fwd(x, ps.tensor(self.kernel), ps.tensor(self.bias), 1, 1)?;
        let (out, _, _) = kernels::bn_normalize(
            &conv,
            ps.tensor(self.scale),
            ps.tensor(self.shift),
            &self.bn_state.running_mean,
            &self.bn_state.running_var,
            BN_EPS,
        )?;
        Ok(out.map(|v| if v > 0.0 { v } else { 0.0 }))
    }
}

/// Two stacked conv blocks forming one encoder level: the first changes the
/// channel count (doubling at level transitions), the second preserves it.
/// Pooling between levels is applied by the graph, not the block.
#[derive(Clone)]
pub struct DownBlock {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    /// Whether the graph max-pools this block's output to feed the next level.
    pub pooled: bool,
}

impl DownBlock {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        pooled: bool,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let conv1 = ConvBlock::new(ps, &format!("{prefix}.conv1"), in_channels, out_channels, rng);
        let conv2 = ConvBlock::new(ps, &format!("{prefix}.conv2"), out_channels, out_channels, rng);
        Self { conv1, conv2, pooled }
    }

    pub fn forward_train(&mut self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        let a = self.conv1.forward_train(tape, pv, x)?;
        self.conv2.forward_train(tape, pv, a)
    }

    pub fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let a = self.conv1.forward_eval(ps, x)?;
        self.conv2.forward_eval(ps, &a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    /// Output has half the input channels (decoder with skip connections).
    Halve,
    /// Output keeps the input channel count (skip-free decoder).
    Preserve,
}

/// 4×4 stride-2 pad-1 transposed convolution that exactly doubles the
/// spatial extent. Initialized as a per-channel bilinear interpolator:
/// matched channel pairs carry the bilinear kernel, all cross-channel taps
/// start at zero.
#[derive(Clone)]
pub struct UpBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    kernel: usize,
    bias: usize,
    name: String,
}

impl UpBlock {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        mode: ChannelMode,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let _ = rng; // placement kept uniform with other blocks; init is deterministic
        let out_channels = match mode {
            ChannelMode::Halve => {
                if in_channels % 2 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "{prefix}: cannot halve odd channel count {in_channels}"
                    )));
                }
                in_channels / 2
            }
            ChannelMode::Preserve => in_channels,
        };
        let bil = bilinear_kernel(4, 2)?;
        let mut kernel = Tensor::zeros(&[in_channels, out_channels, 4, 4]);
        {
            let kd = kernel.data_mut();
            for c in 0..out_channels.min(in_channels) {
                for i in 0..16 {
                    kd[((c * out_channels + c) * 16) + i] = bil.data()[i];
                }
            }
        }
        let kernel = ps.add(&format!("{prefix}.kernel"), kernel);
        let bias = ps.add(&format!("{prefix}.bias"), Tensor::zeros(&[out_channels]));
        Ok(Self { in_channels, out_channels, kernel, bias, name: prefix.to_string() })
    }

    fn check_in(&self, channels: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} input channels, got {channels}",
                self.name, self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        self.check_in(tape.value(x).dims4()?.1)?;
        tape.conv_transpose2d(x, pv[self.kernel], pv[self.bias], 2, 1)
    }

    pub fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_in(x.dims4()?.1)?;
        kernels::convt2d_fwd(x, ps.tensor(self.kernel), ps.tensor(self.bias), 2, 1)
    }
}

/// Decoder-node convolution: concatenates the skip feature maps with the
/// upsampled parent, then applies one ConvBlock whose output width equals
/// the encoder width at the same level.
#[derive(Clone)]
pub struct SkipConvBlock {
    pub block: ConvBlock,
}

impl SkipConvBlock {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        upsampled_channels: usize,
        skip_channels: &[usize],
        out_channels: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let in_channels = upsampled_channels + skip_channels.iter().sum::<usize>();
        Self { block: ConvBlock::new(ps, prefix, in_channels, out_channels, rng) }
    }

    fn gather(tape: &mut Tape, upsampled: Var, skips: &[Var]) -> Result<Var> {
        if skips.is_empty() {
            return Ok(upsampled);
        }
        let mut inputs: Vec<Var> = skips.to_vec();
        inputs.push(upsampled);
        tape.concat(&inputs)
    }

    pub fn forward_train(&mut self, tape: &mut Tape, pv: &[Var], upsampled: Var, skips: &[Var]) -> Result<Var> {
        let joined = Self::gather(tape, upsampled, skips)?;
        self.block.forward_train(tape, pv, joined)
    }

    pub fn forward_eval(&self, ps: &ParamSet, upsampled: &Tensor, skips: &[&Tensor]) -> Result<Tensor> {
        if skips.is_empty() {
            return self.block.forward_eval(ps, upsampled);
        }
        let (b, _, h, w) = upsampled.dims4()?;
        let mut c_total = upsampled.shape()[1];
        for s in skips {
            let (sb, sc, sh, sw) = s.dims4()?;
            if (sb, sh, sw) != (b, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: skip shape {:?} incompatible with upsampled {:?}",
                    self.block.name,
                    s.shape(),
                    upsampled.shape()
                )));
            }
            c_total += sc;
        }
        let plane = h * w;
        let mut data = vec![0.0f64; b * c_total * plane];
        for bi in 0..b {
            let mut off = 0;
            for s in skips.iter().copied().chain(std::iter::once(upsampled)) {
                let c = s.shape()[1];
                data[(bi * c_total + off) * plane..(bi * c_total + off + c) * plane]
                    .copy_from_slice(&s.data()[bi * c * plane..(bi + 1) * c * plane]);
                off += c;
            }
        }
        let joined = Tensor::new(vec![b, c_total, h, w], data)?;
        self.block.forward_eval(ps, &joined)
    }
}

/// 1×1 convolution + sigmoid producing a 1-channel probability map.
#[derive(Clone)]
pub struct Head {
    kernel: usize,
    bias: usize,
}

impl Head {
    pub fn new(ps: &mut ParamSet, prefix: &str, in_channels: usize, rng: &mut ChaCha20Rng) -> Self {
        let kernel = ps.add(&format!("{prefix}.kernel"), kaiming_conv(rng, &[1, in_channels, 1, 1]));
        let bias = ps.add(&format!("{prefix}.bias"), Tensor::zeros(&[1]));
        Self { kernel, bias }
    }

    pub fn forward_train(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        let logits = tape.conv2d(x, pv[self.kernel], pv[self.bias], 1, 0)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let logits = kernels::conv2d_fwd(x, ps.tensor(self.kernel), ps.tensor(self.bias), 1, 0)?;
        Ok(logits.map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn bilinear_taps_for_stride2_4x4() {
        assert_eq!(bilinear_taps(4, 2).unwrap(), vec![0.25, 0.75, 0.75, 0.25]);
        assert!(bilinear_taps(1, 2).is_err());
    }

    #[test]
    fn bilinear_taps_partition_of_unity_per_phase() {
        for (k, f) in [(4usize, 2usize), (6, 3), (8, 4)] {
            let h = bilinear_taps(k, f).unwrap();
            for phase in 0..f {
                let s: f64 = h.iter().skip(phase).step_by(f).sum();
                assert!((s - 1.0).abs() < 1e-12, "k={k} f={f} phase={phase}: {s}");
            }
        }
    }

    #[test]
    fn bilinear_upsample_preserves_constant_interior() {
        let mut ps = ParamSet::new();
        let up = UpBlock::new(&mut ps, "up", 2, ChannelMode::Halve, &mut rng()).unwrap();
        let x = Tensor::full(&[1, 2, 4, 4], 3.5);
        let y = up.forward_eval(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        for r in 1..7 {
            for c in 1..7 {
                assert!(
                    (y.at(&[0, 0, r, c]) - 3.5).abs() < 1e-6,
                    "interior ({r},{c}) = {}",
                    y.at(&[0, 0, r, c])
                );
            }
        }
    }

    #[test]
    fn bilinear_upsample_keeps_ramp_linear() {
        let mut ps = ParamSet::new();
        let up = UpBlock::new(&mut ps, "up", 1, ChannelMode::Preserve, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[1, 1, 4, 6], |i| (i % 6) as f64);
        let y = up.forward_eval(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 12]);
        // interior columns of any interior row must be affine in the column
        // index: second differences vanish
        for r in 2..6 {
            for c in 2..9 {
                let second_diff =
                    y.at(&[0, 0, r, c + 1]) - 2.0 * y.at(&[0, 0, r, c]) + y.at(&[0, 0, r, c - 1]);
                assert!(second_diff.abs() < 1e-9, "row {r} col {c}: {second_diff}");
            }
        }
    }

    #[test]
    fn conv_block_param_count() {
        let mut ps = ParamSet::new();
        let _ = ConvBlock::new(&mut ps, "b", 1, 32, &mut rng());
        // 3*3*1*32 kernel + 32 bias + 32 scale + 32 shift
        assert_eq!(ps.total_scalars(), 288 + 32 + 32 + 32);
    }

    #[test]
    fn down_block_shapes_and_channel_check() {
        let mut ps = ParamSet::new();
        let mut down = DownBlock::new(&mut ps, "d", 32, 64, true, &mut rng());
        let mut tape = Tape::new();
        let pv = ps.bind(&mut tape);
        let x = tape.leaf(Tensor::from_fn(&[2, 32, 8, 8], |i| (i % 13) as f64 * 0.1 - 0.5));
        let y = down.forward_train(&mut tape, &pv, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 64, 8, 8]);
        assert!(tape.value(y).is_finite());

        let bad = tape.leaf(Tensor::zeros(&[2, 16, 8, 8]));
        assert!(down.forward_train(&mut tape, &pv, bad).is_err());
    }

    #[test]
    fn stem_block_maps_one_channel_to_base() {
        let mut ps = ParamSet::new();
        let stem = DownBlock::new(&mut ps, "stem", 1, 32, true, &mut rng());
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.01).sin());
        let y = stem.forward_eval(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[1, 32, 8, 8]);
    }

    #[test]
    fn up_block_channel_modes() {
        let mut ps = ParamSet::new();
        let halve = UpBlock::new(&mut ps, "h", 64, ChannelMode::Halve, &mut rng()).unwrap();
        let keep = UpBlock::new(&mut ps, "p", 64, ChannelMode::Preserve, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[1, 64, 8, 8], |i| (i % 7) as f64);
        assert_eq!(halve.forward_eval(&ps, &x).unwrap().shape(), &[1, 32, 16, 16]);
        assert_eq!(keep.forward_eval(&ps, &x).unwrap().shape(), &[1, 64, 16, 16]);
        assert!(UpBlock::new(&mut ps, "odd", 5, ChannelMode::Halve, &mut rng()).is_err());
    }

    #[test]
    fn skip_conv_channel_arithmetic() {
        let mut ps = ParamSet::new();
        let sc = SkipConvBlock::new(&mut ps, "sc", 32, &[32, 32], 32, &mut rng());
        assert_eq!(sc.block.in_channels, 96);
        let up = Tensor::from_fn(&[1, 32, 4, 4], |i| i as f64 * 1e-3);
        let s1 = Tensor::from_fn(&[1, 32, 4, 4], |i| i as f64 * -1e-3);
        let s2 = Tensor::full(&[1, 32, 4, 4], 0.25);
        let y = sc.forward_eval(&ps, &up, &[&s1, &s2]).unwrap();
        assert_eq!(y.shape(), &[1, 32, 4, 4]);

        let bad = Tensor::zeros(&[1, 32, 2, 2]);
        assert!(sc.forward_eval(&ps, &up, &[&bad]).is_err());
    }

    #[test]
    fn gradient_reaches_every_skip_input() {
        let mut ps = ParamSet::new();
        let mut sc = SkipConvBlock::new(&mut ps, "sc", 4, &[4, 4], 4, &mut rng());
        let mut tape = Tape::new();
        let pv = ps.bind(&mut tape);
        let up = tape.leaf(Tensor::from_fn(&[1, 4, 4, 4], |i| (i % 5) as f64 * 0.2).with_grad());
        let s1 = tape.leaf(Tensor::from_fn(&[1, 4, 4, 4], |i| (i % 3) as f64 * 0.3).with_grad());
        let s2 = tape.leaf(Tensor::from_fn(&[1, 4, 4, 4], |i| (i % 7) as f64 * 0.1).with_grad());
        let y = sc.forward_train(&mut tape, &pv, up, &[s1, s2]).unwrap();
        let loss = tape.mean(y);
        let grads = tape.backward(loss).unwrap();
        for (name, v) in [("up", up), ("s1", s1), ("s2", s2)] {
            let g = grads.get(v).unwrap_or_else(|| panic!("{name} got no gradient"));
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} gradient all zero");
        }
    }
}
