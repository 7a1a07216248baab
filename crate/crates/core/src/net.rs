//! Graph construction and execution for the nested encoder/decoder family.
//!
//! Nodes are indexed `(i, j)`: `i` is the resolution level (spatial extent
//! `input_size / 2^i`, width `base_channels * 2^i`), `j` the decoder column.
//! Encoder nodes are `(i, 0)`. Decoder node `(i, j)` consumes the upsampled
//! `(i+1, j-1)` plus a variant-dependent set of same-level skips:
//! every earlier column (nested dense variant), only the encoder column
//! (plain-skip variants), or nothing (encoding variants).

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ChannelMode, ConvBlock, DownBlock, Head, ParamSet, SkipConvBlock, UpBlock};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain U-Net: single decoder diagonal, encoder skip at each level.
    Unet,
    /// Full node lattice but only the encoder-column skip at each level.
    UnetE,
    /// Plain U-Net trained with per-level encoder feature supervision.
    EsUnet,
    /// Nested dense-skip lattice.
    Unetpp,
    /// Nested lattice with every skip removed (label autoencoder).
    EncodingUnetpp,
    /// Single skip-free decoder chain from the bottleneck (label autoencoder).
    EncodingUnet,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "unet" => Variant::Unet,
            "unet_e" => Variant::UnetE,
            "es_unet" => Variant::EsUnet,
            "unetpp" => Variant::Unetpp,
            "encoding_unetpp" => Variant::EncodingUnetpp,
            "encoding_unet" => Variant::EncodingUnet,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown variant '{other}' (expected unet, unet_e, es_unet, unetpp, encoding_unetpp, encoding_unet)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetE => "unet_e",
            Variant::EsUnet => "es_unet",
            Variant::Unetpp => "unetpp",
            Variant::EncodingUnetpp => "encoding_unetpp",
            Variant::EncodingUnet => "encoding_unet",
        }
    }

    /// Whether decoder nodes exist at every `(i, j)` with `i + j <= depth`
    /// (as opposed to the single plain-U-Net diagonal).
    pub fn full_lattice(self) -> bool {
        matches!(self, Variant::UnetE | Variant::Unetpp | Variant::EncodingUnetpp)
    }

    /// Whether decoder nodes receive skip connections.
    pub fn has_skips(self) -> bool {
        !matches!(self, Variant::EncodingUnetpp | Variant::EncodingUnet)
    }

    /// The skip-free counterpart that supplies supervision features.
    pub fn encoding_counterpart(self) -> Variant {
        match self {
            Variant::Unet | Variant::EsUnet | Variant::EncodingUnet => Variant::EncodingUnet,
            _ => Variant::EncodingUnetpp,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Loss on the deepest head only.
    Ns,
    /// Averaged loss over every head.
    Ds,
}

impl Supervision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ns" => Ok(Supervision::Ns),
            "ds" => Ok(Supervision::Ds),
            other => Err(Error::InvalidConfig(format!("unknown supervision '{other}' (expected ns or ds)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Supervision::Ns => "ns",
            Supervision::Ds => "ds",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSupervision {
    /// No encoder feature loss (plain training).
    None,
    /// Bottleneck feature only (deepest encoder level).
    Bs,
    /// Every encoder level from 1 to depth.
    Es,
}

impl FeatureSupervision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "un" => Ok(FeatureSupervision::None),
            "bs" => Ok(FeatureSupervision::Bs),
            "es" => Ok(FeatureSupervision::Es),
            other => Err(Error::InvalidConfig(format!(
                "unknown feature supervision '{other}' (expected un/none, bs, es)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSupervision::None => "un",
            FeatureSupervision::Bs => "bs",
            FeatureSupervision::Es => "es",
        }
    }

    /// Encoder levels whose features are supervised.
    pub fn levels(self, depth: usize) -> Vec<usize> {
        match self {
            FeatureSupervision::None => vec![],
            FeatureSupervision::Bs => vec![depth],
            FeatureSupervision::Es => (1..=depth).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: Variant,
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub input_size: usize,
    pub seed: u64,
    #[serde(default = "default_supervision")]
    pub supervision: Supervision,
    #[serde(default = "default_feature_supervision")]
    pub feature_supervision: FeatureSupervision,
}

fn default_supervision() -> Supervision {
    Supervision::Ds
}

fn default_feature_supervision() -> FeatureSupervision {
    FeatureSupervision::None
}

impl NetConfig {
    pub fn new(variant: Variant, depth: usize, base_channels: usize, in_channels: usize, input_size: usize, seed: u64) -> Self {
        Self {
            variant,
            depth,
            base_channels,
            in_channels,
            input_size,
            seed,
            // single-head variants can only train their one head
            supervision: if variant.full_lattice() { Supervision::Ds } else { Supervision::Ns },
            feature_supervision: default_feature_supervision(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} not divisible by 2^depth = {div}",
                self.input_size
            )));
        }
        if self.supervision == Supervision::Ds && !self.variant.full_lattice() {
            return Err(Error::InvalidConfig(format!(
                "variant {} has a single head; deep supervision needs the full lattice",
                self.variant
            )));
        }
        Ok(())
    }

    /// Channel width at resolution level `i`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Node keys in topological (construction) order.
    pub fn node_keys(&self) -> Vec<(usize, usize)> {
        let mut keys: Vec<(usize, usize)> = (0..=self.depth).map(|i| (i, 0)).collect();
        for j in 1..=self.depth {
            for i in 0..=(self.depth - j) {
                if self.variant.full_lattice() || i + j == self.depth {
                    keys.push((i, j));
                }
            }
        }
        keys
    }

    /// Same-level skip sources of decoder node `(i, j)`.
    pub fn skip_sources(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        match self.variant {
            Variant::Unetpp => (0..j).map(|jj| (i, jj)).collect(),
            Variant::Unet | Variant::UnetE | Variant::EsUnet => vec![(i, 0)],
            Variant::EncodingUnetpp | Variant::EncodingUnet => vec![],
        }
    }

    /// Head columns, ascending.
    pub fn head_columns(&self) -> Vec<usize> {
        if self.variant.full_lattice() {
            (1..=self.depth).collect()
        } else {
            vec![self.depth]
        }
    }
}

struct DecoderNode {
    up: UpBlock,
    conv: SkipConvBlock,
    skips: Vec<(usize, usize)>,
}

pub struct NetGraph {
    pub cfg: NetConfig,
    params: ParamSet,
    encoder: Vec<DownBlock>,
    decoders: BTreeMap<(usize, usize), DecoderNode>,
    heads: BTreeMap<usize, Head>,
}

/// Training-mode forward results: tape variables for every node, every
/// head probability map, and the pre-pooling encoder features.
pub struct TrainForward {
    pub param_vars: Vec<Var>,
    pub heads: BTreeMap<usize, Var>,
    pub encoder: Vec<Var>,
    pub nodes: BTreeMap<(usize, usize), Var>,
}

/// Evaluation-mode forward results (running batch-norm statistics, no tape).
pub struct EvalForward {
    pub heads: BTreeMap<usize, Tensor>,
    pub encoder: Vec<Tensor>,
    pub nodes: BTreeMap<(usize, usize), Tensor>,
}

impl NetGraph {
    pub fn build(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();

        let mut encoder = Vec::with_capacity(cfg.depth + 1);
        for i in 0..=cfg.depth {
            let in_ch = if i == 0 { cfg.in_channels } else { cfg.channels(i - 1) };
            encoder.push(DownBlock::new(
                &mut params,
                &format!("node_{i}_0"),
                in_ch,
                cfg.channels(i),
                i < cfg.depth,
                &mut rng,
            ));
        }

        let mut decoders = BTreeMap::new();
        for &(i, j) in cfg.node_keys().iter().filter(|&&(_, j)| j > 0) {
            let mode = if cfg.variant.has_skips() { ChannelMode::Halve } else { ChannelMode::Preserve };
            let up = UpBlock::new(&mut params, &format!("node_{i}_{j}.up"), cfg.channels(i + 1), mode, &mut rng)?;
            let skips = cfg.skip_sources(i, j);
            let skip_channels: Vec<usize> = skips.iter().map(|_| cfg.channels(i)).collect();
            let conv = SkipConvBlock::new(
                &mut params,
                &format!("node_{i}_{j}.conv"),
                up.out_channels,
                &skip_channels,
                cfg.channels(i),
                &mut rng,
            );
            decoders.insert((i, j), DecoderNode { up, conv, skips });
        }

        let mut heads = BTreeMap::new();
        for j in cfg.head_columns() {
            heads.insert(j, Head::new(&mut params, &format!("node_0_{j}.head"), cfg.channels(0), &mut rng));
        }

        Ok(Self { cfg, params, encoder, decoders, heads })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }

    pub fn node_keys(&self) -> Vec<(usize, usize)> {
        self.cfg.node_keys()
    }

    /// All inputs of a decoder node: the upsampled parent first, then skips.
    pub fn inputs_of(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        match self.decoders.get(&(i, j)) {
            Some(node) => {
                let mut v = vec![(i + 1, j - 1)];
                v.extend(node.skips.iter().copied());
                v
            }
            None => vec![],
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.input_size;
        if c != self.cfg.in_channels || h != s || w != s {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?} does not match config (channels {}, size {s})",
                x.shape(),
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, tape: &mut Tape, x: &Tensor) -> Result<TrainForward> {
        self.check_input(x)?;
        let pv = self.params.bind(tape);
        let input = tape.leaf(x.clone());

        let mut nodes: BTreeMap<(usize, usize), Var> = BTreeMap::new();
        let mut cur = input;
        for i in 0..=self.cfg.depth {
            let out = self.encoder[i].forward_train(tape, &pv, cur)?;
            nodes.insert((i, 0), out);
            if self.encoder[i].pooled {
                cur = tape.max_pool2d(out, 2)?;
            }
        }

        let keys: Vec<(usize, usize)> = self.cfg.node_keys().into_iter().filter(|&(_, j)| j > 0).collect();
        for (i, j) in keys {
            let node = self.decoders.get_mut(&(i, j)).expect("decoder node");
            let parent = nodes[&(i + 1, j - 1)];
            let up = node.up.forward_train(tape, &pv, parent)?;
            let skips: Vec<Var> = node.skips.iter().map(|k| nodes[k]).collect();
            let out = node.conv.forward_train(tape, &pv, up, &skips)?;
            nodes.insert((i, j), out);
        }

        let mut heads = BTreeMap::new();
        for (&j, head) in &self.heads {
            heads.insert(j, head.forward_train(tape, &pv, nodes[&(0, j)])?);
        }

        let encoder = (0..=self.cfg.depth).map(|i| nodes[&(i, 0)]).collect();
        Ok(TrainForward { param_vars: pv, heads, encoder, nodes })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<EvalForward> {
        self.check_input(x)?;
        let mut nodes: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        let mut cur = x.clone();
        for i in 0..=self.cfg.depth {
            let out = self.encoder[i].forward_eval(&self.params, &cur)?;
            if self.encoder[i].pooled {
                let (pooled, _) = kernels::maxpool_fwd(&out, 2, 2)?;
                cur = pooled;
            }
            nodes.insert((i, 0), out);
        }

        for (i, j) in self.cfg.node_keys().into_iter().filter(|&(_, j)| j > 0) {
            let node = &self.decoders[&(i, j)];
            let up = node.up.forward_eval(&self.params, &nodes[&(i + 1, j - 1)])?;
            let skips: Vec<&Tensor> = node.skips.iter().map(|k| &nodes[k]).collect();
            let out = node.conv.forward_eval(&self.params, &up, &skips)?;
            nodes.insert((i, j), out);
        }

        let mut heads = BTreeMap::new();
        for (&j, head) in &self.heads {
            heads.insert(j, head.forward_eval(&self.params, &nodes[&(0, j)])?);
        }

        let encoder = (0..=self.cfg.depth).map(|i| nodes[&(i, 0)].clone()).collect();
        Ok(EvalForward { heads, encoder, nodes })
    }

    /// State for serialization: every trainable parameter plus batch-norm
    /// running statistics, keyed by qualified name.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, t) in self.params.iter() {
            out.insert(name.to_string(), t.clone());
        }
        for block in self.conv_blocks() {
            let mean = Tensor::new(vec![block.bn_state.running_mean.len()], block.bn_state.running_mean.clone())
                .expect("stats shape");
            let var = Tensor::new(vec![block.bn_state.running_var.len()], block.bn_state.running_var.clone())
                .expect("stats shape");
            out.insert(format!("{}.bn.running_mean", block.name), mean);
            out.insert(format!("{}.bn.running_var", block.name), var);
        }
        out
    }

    pub fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.state_dict().len();
        if state.len() != expected {
            return Err(Error::BadFormat {
                path: "state".into(),
                reason: format!("state has {} entries, net expects {expected}", state.len()),
            });
        }
        self.copy_state_from(state)
    }

    /// Copies every entry of `state` whose name exists in this net; missing
    /// target names are an error, extra source names are ignored.
    fn copy_state_from(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut stats: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, tensor) in state {
            if let Some(id) = self.params.index_of(name) {
                if self.params.tensor(id).shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "param {name}: stored shape {:?} vs built shape {:?}",
                        tensor.shape(),
                        self.params.tensor(id).shape()
                    )));
                }
                *self.params.tensor_mut(id) = tensor.clone().with_grad();
            } else {
                stats.insert(name.clone(), tensor.clone());
            }
        }
        for block in self.conv_blocks_mut() {
            let prefix = block.name.clone();
            for (field, slot) in [("running_mean", 0usize), ("running_var", 1)] {
                let key = format!("{prefix}.bn.{field}");
                if let Some(t) = stats.get(&key) {
                    if t.numel() != block.out_channels {
                        return Err(Error::ShapeMismatch(format!(
                            "{key}: {} values for {} channels",
                            t.numel(),
                            block.out_channels
                        )));
                    }
                    let dst = if slot == 0 { &mut block.bn_state.running_mean } else { &mut block.bn_state.running_var };
                    dst.copy_from_slice(t.data());
                }
            }
        }
        Ok(())
    }

    fn conv_blocks(&self) -> Vec<&ConvBlock> {
        let mut v = Vec::new();
        for d in &self.encoder {
            v.push(&d.conv1);
            v.push(&d.conv2);
        }
        for node in self.decoders.values() {
            v.push(&node.conv.block);
        }
        v
    }

    fn conv_blocks_mut(&mut self) -> Vec<&mut ConvBlock> {
        let mut v = Vec::new();
        for d in &mut self.encoder {
            v.push(&mut d.conv1);
            v.push(&mut d.conv2);
        }
        for node in self.decoders.values_mut() {
            v.push(&mut node.conv.block);
        }
        v
    }

    /// Cuts the lattice down to `{(i, j): i + j <= level}` with the head at
    /// column `level`. Parameter buffers are shared with the source graph.
    pub fn prune(&self, level: usize) -> Result<NetGraph> {
        if !(1..=self.cfg.depth).contains(&level) {
            return Err(Error::InvalidParam(format!(
                "prune level {level} outside 1..={}",
                self.cfg.depth
            )));
        }
        if !self.cfg.variant.full_lattice() {
            return Err(Error::InvalidConfig(format!(
                "variant {} has no prunable sub-lattice",
                self.cfg.variant
            )));
        }
        let mut cfg = self.cfg;
        cfg.depth = level;
        let mut pruned = NetGraph::build(cfg)?;
        pruned.copy_state_from(&self.state_dict())?;
        Ok(pruned)
    }

    /// Copies all parameters and running statistics from `source`. The two
    /// graphs must agree on architecture (seed may differ).
    pub fn transfer_init(&mut self, source: &NetGraph) -> Result<()> {
        let a = (self.cfg.variant, self.cfg.depth, self.cfg.base_channels, self.cfg.in_channels, self.cfg.input_size);
        let b = (
            source.cfg.variant,
            source.cfg.depth,
            source.cfg.base_channels,
            source.cfg.in_channels,
            source.cfg.input_size,
        );
        if a != b {
            return Err(Error::InvalidConfig(format!(
                "transfer between incompatible architectures: {a:?} vs {b:?}"
            )));
        }
        self.copy_state_from(&source.state_dict())
    }
}
