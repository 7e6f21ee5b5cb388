use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::conv_out_size;
use crate::error::{bail, Result};

/// Building-block variant.
///
/// The `choice_*` variants are ShuffleNet-v2 units whose main branch uses a
/// k×k depthwise convolution (`choice_x`: three 3×3 depthwise convolutions
/// interleaved with 1×1 convolutions). `res_basic` is a two-conv residual
/// block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "choice_3")]
    Choice3,
    #[serde(rename = "choice_5")]
    Choice5,
    #[serde(rename = "choice_7")]
    Choice7,
    #[serde(rename = "choice_x")]
    ChoiceX,
    #[serde(rename = "res_basic")]
    ResBasic,
}

impl Variant {
    pub const SHUFFLE: [Variant; 4] = [Variant::Choice3, Variant::Choice5, Variant::Choice7, Variant::ChoiceX];

    /// Depthwise kernel size for shuffle units, conv kernel for residual ones.
    pub fn kernel(self) -> usize {
        match self {
            Variant::Choice3 | Variant::ChoiceX | Variant::ResBasic => 3,
            Variant::Choice5 => 5,
            Variant::Choice7 => 7,
        }
    }

    pub fn is_shuffle(self) -> bool {
        self != Variant::ResBasic
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Choice3 => "choice_3",
            Variant::Choice5 => "choice_5",
            Variant::Choice7 => "choice_7",
            Variant::ChoiceX => "choice_x",
            Variant::ResBasic => "res_basic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `(weight_bits, activation_bits)`; serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct BitPair {
    pub weight: u32,
    pub act: u32,
}

impl BitPair {
    pub const fn new(weight: u32, act: u32) -> Self {
        Self { weight, act }
    }

    /// Weight/activation menu of the mixed-precision space.
    pub const MENU: [BitPair; 6] = [
        BitPair::new(1, 2),
        BitPair::new(2, 2),
        BitPair::new(1, 4),
        BitPair::new(2, 4),
        BitPair::new(3, 4),
        BitPair::new(4, 4),
    ];
}

impl From<(u32, u32)> for BitPair {
    fn from((weight, act): (u32, u32)) -> Self {
        Self { weight, act }
    }
}

impl From<BitPair> for (u32, u32) {
    fn from(b: BitPair) -> Self {
        (b.weight, b.act)
    }
}

impl fmt::Display for BitPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}W{}A", self.weight, self.act)
    }
}

/// Which gene axes a choice block searches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Block,
    Channel,
    Quant,
    Joint,
}

/// Candidate lists of one choice block. An empty `bit_pairs` list means the
/// block runs in full precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSet {
    pub kind: BlockKind,
    pub variants: Vec<Variant>,
    #[serde(default = "default_multipliers")]
    pub multipliers: Vec<f64>,
    #[serde(default)]
    pub bit_pairs: Vec<BitPair>,
}

fn default_multipliers() -> Vec<f64> {
    vec![1.0]
}

/// `0.2x` to `1.6x` in steps of `0.2x`.
pub fn channel_multipliers() -> Vec<f64> {
    (1..=8).map(|i| i as f64 * 0.2).collect()
}

impl CandidateSet {
    pub fn blocks(variants: &[Variant]) -> Self {
        Self {
            kind: BlockKind::Block,
            variants: variants.to_vec(),
            multipliers: vec![1.0],
            bit_pairs: Vec::new(),
        }
    }

    pub fn channels(variant: Variant, multipliers: Vec<f64>) -> Self {
        Self {
            kind: BlockKind::Channel,
            variants: vec![variant],
            multipliers,
            bit_pairs: Vec::new(),
        }
    }

    pub fn joint(variants: Vec<Variant>, multipliers: Vec<f64>, bit_pairs: Vec<BitPair>) -> Self {
        Self {
            kind: BlockKind::Joint,
            variants,
            multipliers,
            bit_pairs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.multipliers.is_empty() {
            bail!(InvalidSpec, "candidate lists must be nonempty");
        }
        if self.variants.iter().collect::<HashSet<_>>().len() != self.variants.len() {
            bail!(InvalidSpec, "duplicate block variants {:?}", self.variants);
        }
        if self.bit_pairs.iter().collect::<HashSet<_>>().len() != self.bit_pairs.len() {
            bail!(InvalidSpec, "duplicate bit pairs {:?}", self.bit_pairs);
        }
        if self.multipliers.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            bail!(InvalidSpec, "channel multipliers must be positive, got {:?}", self.multipliers);
        }
        if self.multipliers.windows(2).any(|w| w[0] >= w[1]) {
            bail!(InvalidSpec, "channel multipliers must be strictly increasing, got {:?}", self.multipliers);
        }
        for b in &self.bit_pairs {
            if !(1..=crate::engine::quant::MAX_BITS).contains(&b.weight)
                || !(1..=crate::engine::quant::MAX_BITS).contains(&b.act)
            {
                bail!(InvalidSpec, "bit pair {b} outside 1..=4");
            }
        }
        let (nv, nc, nq) = (self.variants.len(), self.multipliers.len(), self.bit_pairs.len());
        let ok = match self.kind {
            BlockKind::Block => nc == 1 && nq <= 1,
            BlockKind::Channel => nv == 1 && nq <= 1,
            BlockKind::Quant => nv == 1 && nc == 1 && nq >= 1,
            BlockKind::Joint => true,
        };
        if !ok {
            bail!(
                InvalidSpec,
                "{:?} block with {nv} variants, {nc} multipliers, {nq} bit pairs",
                self.kind
            );
        }
        Ok(())
    }

    /// Number of choices along the `(variant, channel, quant)` axes.
    pub fn axes(&self) -> [usize; 3] {
        [
            self.variants.len(),
            self.multipliers.len(),
            self.bit_pairs.len().max(1),
        ]
    }
}

/// A choice block resolved against its position in the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceBlockSpec {
    pub candidates: CandidateSet,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial size of the block input (square).
    pub input_size: usize,
}

impl ChoiceBlockSpec {
    pub fn kind(&self) -> BlockKind {
        self.candidates.kind
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.axes().iter().product()
    }

    /// Shuffle units without downsampling or width change split their input
    /// in half and only transform one half.
    pub fn is_split_unit(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    /// Channels produced by the main (searched) branch of a shuffle unit.
    pub fn branch_out(&self) -> usize {
        self.out_channels / 2
    }

    /// Input channels seen by the main branch of a shuffle unit.
    pub fn branch_in(&self) -> usize {
        if self.is_split_unit() {
            self.in_channels / 2
        } else {
            self.in_channels
        }
    }

    fn base_mid(&self, variant: Variant) -> usize {
        if variant.is_shuffle() {
            self.out_channels / 2
        } else {
            self.out_channels
        }
    }

    /// Width of the first 1×1 (or first 3×3 for residual blocks) convolution
    /// under the given multiplier index.
    pub fn mid_channels(&self, variant: Variant, multiplier: usize) -> usize {
        let m = self.candidates.multipliers[multiplier];
        ((self.base_mid(variant) as f64 * m).round() as usize).max(1)
    }

    /// Allocation width: the mid width at the largest multiplier.
    pub fn max_mid_channels(&self, variant: Variant) -> usize {
        self.mid_channels(variant, self.candidates.multipliers.len() - 1)
    }

    pub fn output_size(&self) -> usize {
        conv_out_size(self.input_size, 3, self.stride, 1).unwrap_or(0)
    }

    pub fn bits(&self, quant: usize) -> Option<BitPair> {
        self.candidates.bit_pairs.get(quant).copied()
    }

    pub fn is_quantized(&self) -> bool {
        !self.candidates.bit_pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3×3 stride-2 max pooling after the stem convolution.
    #[serde(default)]
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub repeat: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Optional 1×1 conv + BN + ReLU before global pooling.
    #[serde(default)]
    pub conv_channels: Option<usize>,
}

/// Declarative description of a single-path supernet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub head: HeadSpec,
    pub num_classes: usize,
    /// Candidates shared by every choice block unless overridden.
    pub choices: CandidateSet,
    /// Optional per-block candidate lists, one per choice block.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_block: Vec<CandidateSet>,
}

impl SupernetSpec {
    /// 32×32 desk-scale space: 8 choice blocks of 4 building-block variants.
    pub fn desk() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 1,
                max_pool: false,
            },
            stages: vec![
                StageSpec { repeat: 2, channels: 16, stride: 2 },
                StageSpec { repeat: 2, channels: 32, stride: 2 },
                StageSpec { repeat: 4, channels: 64, stride: 2 },
            ],
            head: HeadSpec {
                conv_channels: Some(128),
            },
            num_classes: 10,
            choices: CandidateSet::blocks(&Variant::SHUFFLE),
            per_block: Vec::new(),
        }
    }

    /// Desk-scale space searching building blocks and mid-channel widths
    /// jointly.
    pub fn desk_joint(multipliers: Vec<f64>) -> Self {
        Self {
            choices: CandidateSet::joint(Variant::SHUFFLE.to_vec(), multipliers, Vec::new()),
            ..Self::desk()
        }
    }

    /// ImageNet-scale supernet: 20 choice blocks in four stages.
    pub fn imagenet() -> Self {
        Self {
            input_channels: 3,
            input_size: 224,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 2,
                max_pool: false,
            },
            stages: vec![
                StageSpec { repeat: 4, channels: 64, stride: 2 },
                StageSpec { repeat: 4, channels: 160, stride: 2 },
                StageSpec { repeat: 8, channels: 320, stride: 2 },
                StageSpec { repeat: 4, channels: 640, stride: 2 },
            ],
            head: HeadSpec {
                conv_channels: Some(1024),
            },
            num_classes: 1000,
            choices: CandidateSet::blocks(&Variant::SHUFFLE),
            per_block: Vec::new(),
        }
    }

    fn resnet(repeats: [usize; 4], choices: CandidateSet) -> Self {
        let widths = [64, 128, 256, 512];
        Self {
            input_channels: 3,
            input_size: 224,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            stages: repeats
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (&repeat, channels))| StageSpec {
                    repeat,
                    channels,
                    stride: if i == 0 { 1 } else { 2 },
                })
                .collect(),
            head: HeadSpec::default(),
            num_classes: 1000,
            choices,
            per_block: Vec::new(),
        }
    }

    /// ResNet-18 res-block space with the given per-block candidates.
    pub fn resnet18(choices: CandidateSet) -> Self {
        Self::resnet([2, 2, 2, 2], choices)
    }

    pub fn resnet34(choices: CandidateSet) -> Self {
        Self::resnet([3, 4, 6, 3], choices)
    }

    /// Joint bottleneck-width × bit-width candidates for residual spaces.
    pub fn quant_joint_choices() -> CandidateSet {
        CandidateSet::joint(vec![Variant::ResBasic], vec![0.5, 1.0, 1.5], BitPair::MENU.to_vec())
    }

    pub const PRESETS: &'static [&'static str] = &[
        "desk",
        "desk-joint",
        "imagenet",
        "imagenet-channels",
        "resnet18-quant",
        "resnet34-quant",
    ];

    /// Named preset; see [`Self::PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "desk" => Self::desk(),
            "desk-joint" => Self::desk_joint(vec![0.5, 1.0, 1.5]),
            "imagenet" => Self::imagenet(),
            "imagenet-channels" => Self {
                choices: CandidateSet::joint(Variant::SHUFFLE.to_vec(), channel_multipliers(), Vec::new()),
                ..Self::imagenet()
            },
            "resnet18-quant" => Self::resnet18(Self::quant_joint_choices()),
            "resnet34-quant" => Self::resnet34(Self::quant_joint_choices()),
            _ => bail!(
                InvalidSpec,
                "unknown preset {name:?} (expected one of {})",
                Self::PRESETS.join(", ")
            ),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.repeat).sum()
    }

    /// Spatial size after the stem.
    pub fn stem_output_size(&self) -> usize {
        let s = conv_out_size(self.input_size, self.stem.kernel, self.stem.stride, self.stem.kernel / 2).unwrap_or(0);
        if self.stem.max_pool {
            conv_out_size(s, 3, 2, 1).unwrap_or(0)
        } else {
            s
        }
    }

    /// Channels entering the head.
    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    /// Channels entering the classifier.
    pub fn classifier_in(&self) -> usize {
        self.head.conv_channels.unwrap_or_else(|| self.final_channels())
    }

    /// Resolves stages into per-block specs without validating them.
    pub(crate) fn resolve_blocks(&self) -> Vec<ChoiceBlockSpec> {
        let mut blocks = Vec::with_capacity(self.num_blocks());
        let mut channels = self.stem.channels;
        let mut size = self.stem_output_size();
        for stage in &self.stages {
            for r in 0..stage.repeat {
                let stride = if r == 0 { stage.stride } else { 1 };
                let idx = blocks.len();
                let candidates = self.per_block.get(idx).cloned().unwrap_or_else(|| self.choices.clone());
                let b = ChoiceBlockSpec {
                    candidates,
                    stride,
                    in_channels: channels,
                    out_channels: stage.channels,
                    input_size: size,
                };
                size = b.output_size();
                channels = stage.channels;
                blocks.push(b);
            }
        }
        blocks
    }

    /// Validated per-block specs.
    pub fn blocks(&self) -> Result<Vec<ChoiceBlockSpec>> {
        self.validate()?;
        Ok(self.resolve_blocks())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_size == 0 || self.num_classes == 0 {
            bail!(InvalidSpec, "input channels, input size and class count must be positive");
        }
        if self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.kernel.is_multiple_of(2) || self.stem.stride == 0 {
            bail!(InvalidSpec, "stem needs positive channels, odd kernel and positive stride");
        }
        if self.stem_output_size() == 0 {
            bail!(InvalidSpec, "stem reduces a {} input to nothing", self.input_size);
        }
        if self.head.conv_channels == Some(0) {
            bail!(InvalidSpec, "head conv needs at least one channel");
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.repeat == 0 || s.channels == 0 || !(1..=2).contains(&s.stride) {
                bail!(InvalidSpec, "stage {i}: repeat and channels must be positive, stride 1 or 2");
            }
        }
        self.choices.validate()?;
        if !self.per_block.is_empty() && self.per_block.len() != self.num_blocks() {
            bail!(
                InvalidSpec,
                "{} per-block candidate lists for {} choice blocks",
                self.per_block.len(),
                self.num_blocks()
            );
        }
        for c in &self.per_block {
            c.validate()?;
        }
        for (i, b) in self.resolve_blocks().iter().enumerate() {
            if b.input_size == 0 || b.output_size() == 0 {
                bail!(InvalidSpec, "block {i} has empty spatial extent");
            }
            if b.candidates.variants.iter().any(|v| v.is_shuffle()) {
                if b.out_channels % 2 != 0 || b.in_channels % 2 != 0 && b.is_split_unit() {
                    bail!(InvalidSpec, "block {i}: shuffle units need even channel counts, got {}", b.out_channels);
                }
                if b.out_channels < 2 {
                    bail!(InvalidSpec, "block {i}: shuffle units need at least 2 channels");
                }
            }
        }
        Ok(())
    }
}
