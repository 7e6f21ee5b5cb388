use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{Architecture, Gene, SearchSpace};
use super::spec::{BitPair, ChoiceBlockSpec, SupernetSpec, Variant};
use super::store::{BnId, RunningStats, SharedWeightStore};
use crate::engine::{BnMode, ConvParams, Eager, Extent, Graph, ParamId, Tensor, DEFAULT_BN_EPS};
use crate::error::{bail, Result};

/// Channel count of a layer edge: fixed, or the block's searched mid width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Width {
    Fixed(usize),
    Mid,
}

#[derive(Clone, Debug)]
struct BnSlot {
    gamma: ParamId,
    beta: ParamId,
    stats: BnId,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: ParamId,
    cin: Width,
    cout: Width,
    k: usize,
    stride: usize,
    depthwise: bool,
    bn: BnSlot,
    relu: bool,
    /// PACT clip level when the layer is quantized.
    alpha: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct VariantWeights {
    variant: Variant,
    main: Vec<ConvLayer>,
    /// Shuffle units: the convolved left branch (empty for split units).
    /// Residual blocks: the projection shortcut (empty for identity).
    side: Vec<ConvLayer>,
}

#[derive(Clone, Debug)]
struct BlockSlot {
    spec: ChoiceBlockSpec,
    variants: Vec<VariantWeights>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvLayer,
    stem_pool: bool,
    blocks: Vec<BlockSlot>,
    head: Option<ConvLayer>,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

/// Resolved per-forward state of one block.
#[derive(Clone, Copy, Debug)]
struct ActiveChoice {
    mid: usize,
    bits: Option<BitPair>,
}

/// Weight-sharing single-path supernet: a spec plus its shared store.
#[derive(Clone, Debug)]
pub struct Supernet {
    spec: SupernetSpec,
    space: SearchSpace,
    layout: Layout,
    pub store: SharedWeightStore,
}

struct Builder<'a> {
    store: &'a mut SharedWeightStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        cin: (Width, usize),
        cout: (Width, usize),
        k: usize,
        stride: usize,
        depthwise: bool,
        relu: bool,
        quantized: bool,
    ) -> ConvLayer {
        let cin_per_group = if depthwise { 1 } else { cin.1 };
        let kernel = self.store.add_kernel(self.rng, format!("{name}.conv"), cout.1, cin_per_group, k);
        let (gamma, beta, stats) = self.store.add_bn(&format!("{name}.bn"), cout.1);
        let alpha = quantized.then(|| self.store.add_alpha(format!("{name}.alpha")));
        ConvLayer {
            kernel,
            cin: cin.0,
            cout: cout.0,
            k,
            stride,
            depthwise,
            bn: BnSlot { gamma, beta, stats },
            relu,
            alpha,
        }
    }

    fn variant(&mut self, prefix: &str, b: &ChoiceBlockSpec, variant: Variant) -> VariantWeights {
        let q = b.is_quantized();
        let mid = (Width::Mid, b.max_mid_channels(variant));
        let p = format!("{prefix}.{}", variant.name());
        let fixed = |n: usize| (Width::Fixed(n), n);
        let (main, side) = if variant.is_shuffle() {
            let (bin, bout) = (fixed(b.branch_in()), fixed(b.branch_out()));
            let k = variant.kernel();
            let s = b.stride;
            let main = if variant == Variant::ChoiceX {
                vec![
                    self.conv(format!("{p}.main.0"), bin, bin, 3, s, true, false, false),
                    self.conv(format!("{p}.main.1"), bin, mid, 1, 1, false, true, q),
                    self.conv(format!("{p}.main.2"), mid, mid, 3, 1, true, false, false),
                    self.conv(format!("{p}.main.3"), mid, mid, 1, 1, false, true, q),
                    self.conv(format!("{p}.main.4"), mid, mid, 3, 1, true, false, false),
                    self.conv(format!("{p}.main.5"), mid, bout, 1, 1, false, true, q),
                ]
            } else {
                vec![
                    self.conv(format!("{p}.main.0"), bin, mid, 1, 1, false, true, q),
                    self.conv(format!("{p}.main.1"), mid, mid, k, s, true, false, false),
                    self.conv(format!("{p}.main.2"), mid, bout, 1, 1, false, true, q),
                ]
            };
            let side = if b.is_split_unit() {
                Vec::new()
            } else {
                let cin = fixed(b.in_channels);
                vec![
                    self.conv(format!("{p}.side.0"), cin, cin, k, s, true, false, false),
                    self.conv(format!("{p}.side.1"), cin, bout, 1, 1, false, true, false),
                ]
            };
            (main, side)
        } else {
            let (cin, cout) = (fixed(b.in_channels), fixed(b.out_channels));
            let main = vec![
                self.conv(format!("{p}.main.0"), cin, mid, 3, b.stride, false, true, q),
                self.conv(format!("{p}.main.1"), mid, cout, 3, 1, false, false, q),
            ];
            let side = if b.stride != 1 || b.in_channels != b.out_channels {
                vec![self.conv(format!("{p}.side.0"), cin, cout, 1, b.stride, false, false, q)]
            } else {
                Vec::new()
            };
            (main, side)
        };
        VariantWeights { variant, main, side }
    }
}

impl Supernet {
    /// Allocates every candidate's weights at maximum width and initializes
    /// them deterministically from `seed`.
    pub fn build(spec: &SupernetSpec, seed: u64) -> Result<Self> {
        let blocks = spec.blocks()?;
        let space = SearchSpace::from_spec(spec)?;
        let mut store = SharedWeightStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let sc = spec.stem.channels;
        let stem = b.conv(
            "stem".into(),
            (Width::Fixed(spec.input_channels), spec.input_channels),
            (Width::Fixed(sc), sc),
            spec.stem.kernel,
            spec.stem.stride,
            false,
            true,
            false,
        );
        let slots = blocks
            .into_iter()
            .enumerate()
            .map(|(i, bs)| {
                let variants = bs
                    .candidates
                    .variants
                    .iter()
                    .map(|&v| b.variant(&format!("blocks.{i}"), &bs, v))
                    .collect();
                BlockSlot { spec: bs, variants }
            })
            .collect();
        let fin = spec.final_channels();
        let head = spec.head.conv_channels.map(|hc| {
            b.conv(
                "head".into(),
                (Width::Fixed(fin), fin),
                (Width::Fixed(hc), hc),
                1,
                1,
                false,
                true,
                false,
            )
        });
        let cin = spec.classifier_in();
        let k = spec.num_classes;
        let normal = Normal::new(0.0f32, 0.01).expect("finite std");
        let w = (0..k * cin).map(|_| normal.sample(&mut rng)).collect();
        let fc_weight = store.params.add("fc.weight", Tensor::new(vec![k, cin], w)?);
        let fc_bias = store.params.add("fc.bias", Tensor::zeros(&[k]));
        Ok(Self {
            spec: spec.clone(),
            space,
            layout: Layout {
                stem,
                stem_pool: spec.stem.max_pool,
                blocks: slots,
                head,
                fc_weight,
                fc_bias,
            },
            store,
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.blocks.len()
    }

    pub fn block_spec(&self, i: usize) -> &ChoiceBlockSpec {
        &self.layout.blocks[i].spec
    }

    pub fn check_arch(&self, arch: &Architecture) -> Result<()> {
        self.space.check(arch)
    }

    fn resolve(&self, block: usize, gene: Gene) -> (&VariantWeights, ActiveChoice) {
        let slot = &self.layout.blocks[block];
        let vw = &slot.variants[gene.variant as usize];
        let mid = slot.spec.mid_channels(vw.variant, gene.channel as usize);
        let bits = slot.spec.bits(gene.quant as usize);
        (vw, ActiveChoice { mid, bits })
    }

    /// Single-path forward pass with the supernet's own statistics.
    pub fn forward<G: Graph>(&mut self, g: &mut G, arch: &Architecture, x: G::Var, mode: BnMode) -> Result<G::Var> {
        let mut stats = std::mem::take(&mut self.store.stats);
        let out = self.forward_with_stats(g, &mut stats, arch, x, mode);
        self.store.stats = stats;
        out
    }

    /// Single-path forward pass reading and writing batch-norm statistics in
    /// `stats` instead of the shared store. Exactly one candidate per choice
    /// block executes.
    pub fn forward_with_stats<G: Graph>(
        &self,
        g: &mut G,
        stats: &mut RunningStats,
        arch: &Architecture,
        x: G::Var,
        mode: BnMode,
    ) -> Result<G::Var> {
        self.space.check(arch)?;
        let mut h = self.run_stem(g, stats, x, mode)?;
        for (i, gene) in arch.genes().iter().enumerate() {
            h = self.run_block(g, stats, i, *gene, h, mode)?;
        }
        self.run_head(g, stats, h, mode)
    }

    /// Stem convolution (and max-pool, if configured).
    pub fn run_stem<G: Graph>(&self, g: &mut G, stats: &mut RunningStats, x: G::Var, mode: BnMode) -> Result<G::Var> {
        let h = self.run_layer(g, stats, &self.layout.stem, x, None, 0, mode)?;
        if self.layout.stem_pool {
            return g.max_pool2d(&h, 3, 2, 1);
        }
        Ok(h)
    }

    /// Head convolution, pooling and classifier.
    pub fn run_head<G: Graph>(&self, g: &mut G, stats: &mut RunningStats, mut h: G::Var, mode: BnMode) -> Result<G::Var> {
        if let Some(head) = &self.layout.head {
            h = self.run_layer(g, stats, head, h, None, 0, mode)?;
        }
        let pooled = g.global_avg_pool(&h)?;
        let p = &self.store.params;
        let w = g.param(p, self.layout.fc_weight, p.full_extent(self.layout.fc_weight))?;
        let b = g.param(p, self.layout.fc_bias, p.full_extent(self.layout.fc_bias))?;
        g.linear(&pooled, &w, Some(&b))
    }

    /// Runs block `i` with `gene` on `x`.
    pub fn run_block<G: Graph>(
        &self,
        g: &mut G,
        stats: &mut RunningStats,
        block: usize,
        gene: Gene,
        x: G::Var,
        mode: BnMode,
    ) -> Result<G::Var> {
        let (vw, choice) = self.resolve(block, gene);
        let spec = &self.layout.blocks[block].spec;
        let run = |g: &mut G, stats: &mut RunningStats, layers: &[ConvLayer], mut h: G::Var| -> Result<G::Var> {
            for l in layers {
                h = self.run_layer(g, stats, l, h, choice.bits, choice.mid, mode)?;
            }
            Ok(h)
        };
        if vw.variant.is_shuffle() {
            let (left, right_in) = if spec.is_split_unit() {
                let half = spec.in_channels / 2;
                (g.narrow_channels(&x, 0, half)?, g.narrow_channels(&x, half, half)?)
            } else {
                (run(g, stats, &vw.side, x.clone())?, x)
            };
            let right = run(g, stats, &vw.main, right_in)?;
            let cat = g.concat_channels(&[left, right])?;
            g.channel_shuffle(&cat, 2)
        } else {
            let main = run(g, stats, &vw.main, x.clone())?;
            let short = if vw.side.is_empty() {
                x
            } else {
                run(g, stats, &vw.side, x)?
            };
            let sum = g.add(&main, &short)?;
            g.relu(&sum)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_layer<G: Graph>(
        &self,
        g: &mut G,
        stats: &mut RunningStats,
        l: &ConvLayer,
        mut x: G::Var,
        bits: Option<BitPair>,
        mid: usize,
        mode: BnMode,
    ) -> Result<G::Var> {
        let width = |w: Width| match w {
            Width::Fixed(n) => n,
            Width::Mid => mid,
        };
        let (cin, cout) = (width(l.cin), width(l.cout));
        let p = &self.store.params;
        let extent = if l.depthwise {
            Extent::new(cout, 1)
        } else {
            Extent::new(cout, cin)
        };
        let mut w = g.param(p, l.kernel, extent)?;
        if let (Some(bits), Some(alpha)) = (bits, l.alpha) {
            let a = g.param(p, alpha, Extent::new(1, 1))?;
            x = g.quantize_activation(&x, &a, bits.act)?;
            w = g.quantize_weight(&w, bits.weight)?;
        }
        let groups = if l.depthwise { cin } else { 1 };
        let y = g.conv2d(&x, &w, ConvParams::new(l.stride, l.k / 2, groups))?;
        let gamma = g.param(p, l.bn.gamma, Extent::new(cout, 1))?;
        let beta = g.param(p, l.bn.beta, Extent::new(cout, 1))?;
        let y = g.batch_norm(&y, &gamma, &beta, stats.get_mut(l.bn.stats), mode, DEFAULT_BN_EPS)?;
        if l.relu {
            g.relu(&y)
        } else {
            Ok(y)
        }
    }

    /// Logits of `arch` on `input` with eager evaluation; train mode updates
    /// the shared running statistics.
    pub fn forward_single_path(&mut self, arch: &Architecture, input: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut g = Eager::new();
        let x = g.input(input.clone());
        let y = self.forward(&mut g, arch, x, mode)?;
        Ok((*y).clone())
    }

    /// Eval-mode logits using `stats` (e.g. a recalibrated private copy).
    pub fn logits_with_stats(&self, arch: &Architecture, input: &Tensor, stats: &RunningStats) -> Result<Tensor> {
        let mut g = Eager::new();
        let x = g.input(input.clone());
        let mut stats = stats.clone();
        let y = self.forward_with_stats(&mut g, &mut stats, arch, x, BnMode::Eval)?;
        Ok((*y).clone())
    }

    fn layers_for<'a>(&'a self, arch: &Architecture) -> Result<Vec<(&'a ConvLayer, ActiveChoice)>> {
        self.space.check(arch)?;
        let none = ActiveChoice { mid: 0, bits: None };
        let mut out = vec![(&self.layout.stem, none)];
        for (i, gene) in arch.genes().iter().enumerate() {
            let (vw, choice) = self.resolve(i, *gene);
            for l in vw.main.iter().chain(&vw.side) {
                out.push((l, choice));
            }
        }
        if let Some(h) = &self.layout.head {
            out.push((h, none));
        }
        Ok(out)
    }

    /// Parameters read by a forward pass of `arch`, with the prefix extent
    /// each is read at.
    pub fn active_params(&self, arch: &Architecture) -> Result<Vec<(ParamId, Extent)>> {
        let p = &self.store.params;
        let mut out = Vec::new();
        for (l, c) in self.layers_for(arch)? {
            let width = |w: Width| match w {
                Width::Fixed(n) => n,
                Width::Mid => c.mid,
            };
            let (cin, cout) = (width(l.cin), width(l.cout));
            out.push((l.kernel, if l.depthwise { Extent::new(cout, 1) } else { Extent::new(cout, cin) }));
            out.push((l.bn.gamma, Extent::new(cout, 1)));
            out.push((l.bn.beta, Extent::new(cout, 1)));
            if let (Some(a), Some(_)) = (l.alpha, c.bits) {
                out.push((a, Extent::new(1, 1)));
            }
        }
        out.push((self.layout.fc_weight, p.full_extent(self.layout.fc_weight)));
        out.push((self.layout.fc_bias, p.full_extent(self.layout.fc_bias)));
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    /// Batch-norm layers on the path of `arch`, with their active widths.
    pub fn active_bn(&self, arch: &Architecture) -> Result<Vec<(BnId, usize)>> {
        let mut out: Vec<(BnId, usize)> = self
            .layers_for(arch)?
            .into_iter()
            .map(|(l, c)| {
                let cout = match l.cout {
                    Width::Fixed(n) => n,
                    Width::Mid => c.mid,
                };
                (l.bn.stats, cout)
            })
            .collect();
        out.sort();
        Ok(out)
    }

    /// Trainable scalars read by a forward pass of `arch`.
    pub fn active_param_count(&self, arch: &Architecture) -> Result<usize> {
        let p = &self.store.params;
        Ok(self
            .active_params(arch)?
            .iter()
            .map(|(id, e)| {
                let shape = p.get(*id).shape();
                let inner: usize = shape.iter().skip(2).product();
                if shape.len() == 1 {
                    e.dim0
                } else {
                    e.dim0 * e.dim1 * inner
                }
            })
            .sum())
    }

    /// Copies exactly the active slices of `arch` into a standalone network
    /// whose every block has a single candidate.
    pub fn instantiate_subnet(&self, arch: &Architecture) -> Result<Subnet> {
        self.space.check(arch)?;
        let blocks: Vec<_> = self.layout.blocks.iter().map(|b| b.spec.clone()).collect();
        let spec = subnet_spec(&self.spec, &blocks, arch);
        let mut net = Supernet::build(&spec, 0)?;
        let fixed = Architecture::uniform(arch.len(), Gene::default());
        let src = self.active_params(arch)?;
        let dst = net.active_params(&fixed)?;
        if src.len() != dst.len() {
            bail!(InvalidArchitecture, "subnet layout diverges from the supernet path");
        }
        for ((sid, sext), (did, dext)) in src.iter().zip(&dst) {
            let view = self.store.params.view(*sid, *sext)?;
            let t = net.store.params.get_mut(*did);
            if view.shape() != t.shape() || *dext != Extent::full(t.shape()) {
                bail!(
                    InvalidArchitecture,
                    "slice of {} has shape {:?}, subnet expects {:?}",
                    self.store.params.name(*sid),
                    view.shape(),
                    t.shape()
                );
            }
            t.data_mut().copy_from_slice(view.to_tensor().data());
        }
        let sbn = self.active_bn(arch)?;
        let dbn = net.active_bn(&fixed)?;
        for ((sid, width), (did, _)) in sbn.iter().zip(&dbn) {
            let s = self.store.stats.get(*sid);
            let d = net.store.stats.get_mut(*did);
            d.mean.copy_from_slice(&s.mean[..*width]);
            d.var.copy_from_slice(&s.var[..*width]);
        }
        Ok(Subnet { net, arch: fixed })
    }

    /// Fresh, randomly initialized standalone network for `arch`.
    pub fn fresh_subnet(spec: &SupernetSpec, arch: &Architecture, seed: u64) -> Result<Subnet> {
        let space = SearchSpace::from_spec(spec)?;
        space.check(arch)?;
        let sub = subnet_spec(spec, &spec.blocks()?, arch);
        let net = Supernet::build(&sub, seed)?;
        Ok(Subnet {
            arch: Architecture::uniform(arch.len(), Gene::default()),
            net,
        })
    }
}

fn subnet_spec(spec: &SupernetSpec, blocks: &[ChoiceBlockSpec], arch: &Architecture) -> SupernetSpec {
    let per_block = blocks
        .iter()
        .zip(arch.genes())
        .map(|(b, g)| {
            let c = &b.candidates;
            let mut one = c.clone();
            one.variants = vec![c.variants[g.variant as usize]];
            one.multipliers = vec![c.multipliers[g.channel as usize]];
            one.bit_pairs = c.bit_pairs.get(g.quant as usize).copied().into_iter().collect();
            one
        })
        .collect();
    SupernetSpec {
        per_block,
        ..spec.clone()
    }
}

/// Standalone network for one architecture.
#[derive(Clone, Debug)]
pub struct Subnet {
    net: Supernet,
    arch: Architecture,
}

impl Subnet {
    pub fn network(&self) -> &Supernet {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Supernet {
        &mut self.net
    }

    /// The (all-zero) architecture selecting the only candidate per block.
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn into_parts(self) -> (Supernet, Architecture) {
        (self.net, self.arch)
    }

    pub fn param_count(&self) -> usize {
        self.net.store.params.num_elements()
    }

    pub fn forward<G: Graph>(&mut self, g: &mut G, x: G::Var, mode: BnMode) -> Result<G::Var> {
        let arch = self.arch.clone();
        self.net.forward(g, &arch, x, mode)
    }

    pub fn logits(&mut self, input: &Tensor, mode: BnMode) -> Result<Tensor> {
        let arch = self.arch.clone();
        self.net.forward_single_path(&arch, input, mode)
    }
}
