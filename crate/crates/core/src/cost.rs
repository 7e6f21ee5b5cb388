//! Weight-independent architecture costs and hard-constraint checks.
//!
//! Costs come from an analytic walk over the spec, not from the supernet, so
//! the two can cross-check each other. One FLOP is counted as one
//! multiply-accumulate.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::conv_out_size;
use crate::error::{bail, Error, Result};
use crate::space::{Architecture, BitPair, ChoiceBlockSpec, Gene, SearchSpace, SupernetSpec, Variant};

/// Convolution as seen by the cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCost {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub input_size: usize,
    pub bits: Option<BitPair>,
}

impl ConvCost {
    pub fn output_size(&self) -> usize {
        conv_out_size(self.input_size, self.kernel, self.stride, self.kernel / 2).unwrap_or(0)
    }

    pub fn macs(&self) -> u64 {
        let o = self.output_size() as u64;
        (self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel) as u64 * o * o
    }

    pub fn bitops(&self) -> u64 {
        self.bits.map_or(0, |b| self.macs() * (b.weight * b.act) as u64)
    }

    /// Kernel, BN affine pair and the PACT clip level when quantized.
    pub fn params(&self) -> u64 {
        let kernel = self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel;
        (kernel + 2 * self.out_channels + usize::from(self.bits.is_some())) as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Totals {
    macs: u64,
    params: u64,
    bitops: u64,
}

impl Totals {
    fn of(convs: &[ConvCost]) -> Self {
        convs.iter().fold(Self::default(), |t, c| Self {
            macs: t.macs + c.macs(),
            params: t.params + c.params(),
            bitops: t.bitops + c.bitops(),
        })
    }

    fn add(self, o: Self) -> Self {
        Self {
            macs: self.macs + o.macs,
            params: self.params + o.params,
            bitops: self.bitops + o.bitops,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv(name: String, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, size: usize, bits: Option<BitPair>) -> ConvCost {
    ConvCost {
        name,
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        groups,
        input_size: size,
        bits,
    }
}

/// Convolutions executed by block `index` under `gene`.
pub fn block_convs(index: usize, b: &ChoiceBlockSpec, gene: Gene) -> Vec<ConvCost> {
    let v = b.candidates.variants[gene.variant as usize];
    let m = b.candidates.multipliers[gene.channel as usize];
    let bits = b.candidates.bit_pairs.get(gene.quant as usize).copied();
    let (cin, cout, s, h) = (b.in_channels, b.out_channels, b.stride, b.input_size);
    let base = if v.is_shuffle() { cout / 2 } else { cout };
    let mid = ((base as f64 * m).round() as usize).max(1);
    let ho = conv_out_size(h, 3, s, 1).unwrap_or(0);
    let p = format!("blocks.{index}.{}", v.name());
    let mut out = Vec::new();
    if v == Variant::ResBasic {
        out.push(conv(format!("{p}.conv1"), cin, mid, 3, s, 1, h, bits));
        out.push(conv(format!("{p}.conv2"), mid, cout, 3, 1, 1, ho, bits));
        if s != 1 || cin != cout {
            out.push(conv(format!("{p}.shortcut"), cin, cout, 1, s, 1, h, bits));
        }
        return out;
    }
    let split = s == 1 && cin == cout;
    let bin = if split { cin / 2 } else { cin };
    let bout = cout / 2;
    if v == Variant::ChoiceX {
        out.push(conv(format!("{p}.dw1"), bin, bin, 3, s, bin, h, None));
        out.push(conv(format!("{p}.pw1"), bin, mid, 1, 1, 1, ho, bits));
        out.push(conv(format!("{p}.dw2"), mid, mid, 3, 1, mid, ho, None));
        out.push(conv(format!("{p}.pw2"), mid, mid, 1, 1, 1, ho, bits));
        out.push(conv(format!("{p}.dw3"), mid, mid, 3, 1, mid, ho, None));
        out.push(conv(format!("{p}.pw3"), mid, bout, 1, 1, 1, ho, bits));
    } else {
        let k = v.kernel();
        out.push(conv(format!("{p}.pw1"), bin, mid, 1, 1, 1, h, bits));
        out.push(conv(format!("{p}.dw"), mid, mid, k, s, mid, h, None));
        out.push(conv(format!("{p}.pw2"), mid, bout, 1, 1, 1, ho, bits));
    }
    if !split {
        let k = v.kernel();
        out.push(conv(format!("{p}.proj_dw"), cin, cin, k, s, cin, h, None));
        out.push(conv(format!("{p}.proj_pw"), cin, bout, 1, 1, 1, ho, None));
    }
    out
}

/// Cost metric usable in a constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Macs,
    Bitops,
    #[serde(alias = "latency")]
    LatencyMs,
    Params,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Macs => "macs",
            Metric::Bitops => "bitops",
            Metric::LatencyMs => "latency_ms",
            Metric::Params => "params",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "macs" | "flops" => Metric::Macs,
            "bitops" => Metric::Bitops,
            "latency" | "latency_ms" => Metric::LatencyMs,
            "params" => Metric::Params,
            _ => bail!(InvalidConfig, "unknown metric {s:?} (expected macs, bitops, latency_ms or params)"),
        })
    }
}

/// Hard bound on one metric: `min <= value <= max`, both inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub metric: Metric,
    pub max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
}

impl ConstraintSpec {
    pub fn max(metric: Metric, max: f64) -> Self {
        Self { metric, max, min: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max > 0.0) || !self.max.is_finite() {
            bail!(InvalidConfig, "{} bound must be a positive number, got {}", self.metric, self.max);
        }
        if let Some(min) = self.min {
            if !(min < self.max) {
                bail!(InvalidConfig, "{} lower bound {min} must be below {}", self.metric, self.max);
            }
        }
        Ok(())
    }

    pub fn holds(&self, value: f64) -> bool {
        value <= self.max && self.min.is_none_or(|m| value >= m)
    }
}

impl FromStr for ConstraintSpec {
    type Err = Error;

    /// `METRIC:MAX` or `METRIC:MIN..MAX`.
    fn from_str(s: &str) -> Result<Self> {
        let Some((metric, bound)) = s.split_once(':') else {
            bail!(InvalidConfig, "constraint {s:?} must look like METRIC:VALUE");
        };
        let num = |t: &str| -> Result<f64> {
            t.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("constraint {s:?}: {t:?} is not a number")))
        };
        let (min, max) = match bound.split_once("..") {
            Some((lo, hi)) => (Some(num(lo)?), num(hi)?),
            None => (None, num(bound)?),
        };
        let c = Self {
            metric: metric.trim().parse()?,
            max,
            min,
        };
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.min {
            Some(min) => write!(f, "{}:{}..{}", self.metric, min, self.max),
            None => write!(f, "{}:{}", self.metric, self.max),
        }
    }
}

/// Per-unit latency in milliseconds: stem, one map per choice block keyed by
/// gene text, and head (head conv, pooling and classifier).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyTable {
    pub stem: f64,
    pub head: f64,
    pub blocks: Vec<BTreeMap<String, f64>>,
}

impl LatencyTable {
    /// Fills every gene of `space` from `f(block, gene)`.
    pub fn from_fn(space: &SearchSpace, stem: f64, head: f64, mut f: impl FnMut(usize, Gene) -> f64) -> Self {
        let blocks = (0..space.num_blocks())
            .map(|b| space.block_genes(b).map(|g| (g.to_string(), f(b, g))).collect())
            .collect();
        Self { stem, head, blocks }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.stem)
            .chain(std::iter::once(&self.head))
            .chain(self.blocks.iter().flat_map(|b| b.values()));
        for v in all {
            if !(*v >= 0.0) || !v.is_finite() {
                bail!(InvalidConfig, "latency entries must be finite and nonnegative, found {v}");
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Milliseconds of block `block` under `gene`.
    pub fn entry(&self, block: usize, gene: Gene) -> Result<f64> {
        let key = gene.to_string();
        self.blocks
            .get(block)
            .and_then(|m| m.get(&key))
            .copied()
            .ok_or(Error::IncompleteTable { block, gene: key })
    }
}

/// Sum of stem, per-block and head entries.
pub fn latency_lookup(arch: &Architecture, table: &LatencyTable) -> Result<f64> {
    let mut total = table.stem + table.head;
    for (i, g) in arch.genes().iter().enumerate() {
        total += table.entry(i, *g)?;
    }
    Ok(total)
}

/// Evaluated costs of one architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macs: u64,
    pub params: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bitops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl Metrics {
    pub fn get(&self, metric: Metric) -> Result<f64> {
        Ok(match metric {
            Metric::Macs => self.macs as f64,
            Metric::Params => self.params as f64,
            Metric::Bitops => match self.bitops {
                Some(b) => b as f64,
                None => bail!(InvalidArchitecture, "architecture carries no quantization genes"),
            },
            Metric::LatencyMs => match self.latency_ms {
                Some(l) => l,
                None => bail!(InvalidConfig, "latency constraint needs a latency table"),
            },
        })
    }
}

/// Precomputed per-block cost tables for fast repeated queries.
#[derive(Clone, Debug)]
pub struct CostModel {
    spec: SupernetSpec,
    blocks: Vec<ChoiceBlockSpec>,
    space: SearchSpace,
    fixed: Totals,
    per_gene: Vec<Vec<Totals>>,
    quantized: bool,
    latency: Option<LatencyTable>,
}

impl CostModel {
    pub fn new(spec: &SupernetSpec) -> Result<Self> {
        let blocks = spec.blocks()?;
        let space = SearchSpace::from_spec(spec)?;
        let fixed = Totals::of(&stem_convs(spec)).add(Totals::of(&head_convs(spec))).add(fc_totals(spec));
        let per_gene = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| space.block_genes(i).map(|g| Totals::of(&block_convs(i, b, g))).collect())
            .collect();
        let quantized = blocks.iter().any(|b| b.is_quantized());
        Ok(Self {
            spec: spec.clone(),
            blocks,
            space,
            fixed,
            per_gene,
            quantized,
            latency: None,
        })
    }

    pub fn with_latency(mut self, table: LatencyTable) -> Result<Self> {
        table.validate()?;
        if table.blocks.len() != self.blocks.len() {
            bail!(
                InvalidConfig,
                "latency table has {} blocks, space has {}",
                table.blocks.len(),
                self.blocks.len()
            );
        }
        self.latency = Some(table);
        Ok(self)
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn latency_table(&self) -> Option<&LatencyTable> {
        self.latency.as_ref()
    }

    fn totals(&self, arch: &Architecture) -> Result<Totals> {
        self.space.check(arch)?;
        Ok(arch
            .genes()
            .iter()
            .enumerate()
            .fold(self.fixed, |t, (i, g)| t.add(self.per_gene[i][self.space.gene_index(i, *g)])))
    }

    pub fn macs(&self, arch: &Architecture) -> Result<u64> {
        Ok(self.totals(arch)?.macs)
    }

    pub fn params(&self, arch: &Architecture) -> Result<u64> {
        Ok(self.totals(arch)?.params)
    }

    pub fn bitops(&self, arch: &Architecture) -> Result<u64> {
        if !self.quantized {
            bail!(InvalidArchitecture, "space has no quantization genes");
        }
        Ok(self.totals(arch)?.bitops)
    }

    pub fn latency_ms(&self, arch: &Architecture) -> Result<f64> {
        match &self.latency {
            Some(t) => {
                self.space.check(arch)?;
                latency_lookup(arch, t)
            }
            None => bail!(InvalidConfig, "latency constraint needs a latency table"),
        }
    }

    pub fn metric(&self, arch: &Architecture, metric: Metric) -> Result<f64> {
        Ok(match metric {
            Metric::Macs => self.macs(arch)? as f64,
            Metric::Params => self.params(arch)? as f64,
            Metric::Bitops => self.bitops(arch)? as f64,
            Metric::LatencyMs => self.latency_ms(arch)?,
        })
    }

    pub fn metrics(&self, arch: &Architecture) -> Result<Metrics> {
        let t = self.totals(arch)?;
        Ok(Metrics {
            macs: t.macs,
            params: t.params,
            bitops: self.quantized.then_some(t.bitops),
            latency_ms: self.latency.as_ref().map(|l| latency_lookup(arch, l)).transpose()?,
        })
    }

    /// True iff every constraint holds (conjunctive, inclusive bounds).
    pub fn satisfies(&self, arch: &Architecture, constraints: &[ConstraintSpec]) -> Result<bool> {
        for c in constraints {
            if !c.holds(self.metric(arch, c.metric)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Checks up front that every constraint's metric is computable.
    pub fn check_constraints(&self, constraints: &[ConstraintSpec]) -> Result<()> {
        let probe = Architecture::uniform(self.blocks.len(), Gene::default());
        for c in constraints {
            c.validate()?;
            self.metric(&probe, c.metric)?;
        }
        Ok(())
    }

    pub fn report(&self, arch: &Architecture) -> Result<CostReport> {
        self.space.check(arch)?;
        let lat = self.latency.as_ref();
        let mut rows = Vec::new();
        let mut unit = |name: String, t: Totals, latency: Option<f64>| {
            rows.push(CostRow {
                name,
                macs: t.macs,
                params: t.params,
                bitops: t.bitops,
                latency_ms: latency,
            })
        };
        unit("stem".into(), Totals::of(&stem_convs(&self.spec)), lat.map(|l| l.stem));
        for (i, g) in arch.genes().iter().enumerate() {
            let latency = lat.map(|l| l.entry(i, *g)).transpose()?;
            unit(format!("block{i}[{g}]"), Totals::of(&block_convs(i, &self.blocks[i], *g)), latency);
        }
        let head = Totals::of(&head_convs(&self.spec)).add(fc_totals(&self.spec));
        unit("head".into(), head, lat.map(|l| l.head));
        let total = CostRow {
            name: "total".into(),
            macs: rows.iter().map(|r| r.macs).sum(),
            params: rows.iter().map(|r| r.params).sum(),
            bitops: rows.iter().map(|r| r.bitops).sum(),
            latency_ms: lat.map(|_| rows.iter().filter_map(|r| r.latency_ms).sum()),
        };
        Ok(CostReport {
            arch: arch.clone(),
            rows,
            total,
        })
    }
}

fn stem_convs(spec: &SupernetSpec) -> Vec<ConvCost> {
    let s = &spec.stem;
    vec![conv(
        "stem".into(),
        spec.input_channels,
        s.channels,
        s.kernel,
        s.stride,
        1,
        spec.input_size,
        None,
    )]
}

fn final_size(spec: &SupernetSpec) -> usize {
    let mut size = spec.stem_output_size();
    for st in &spec.stages {
        size = conv_out_size(size, 3, st.stride, 1).unwrap_or(0);
    }
    size
}

fn head_convs(spec: &SupernetSpec) -> Vec<ConvCost> {
    spec.head
        .conv_channels
        .map(|hc| conv("head".into(), spec.final_channels(), hc, 1, 1, 1, final_size(spec), None))
        .into_iter()
        .collect()
}

fn fc_totals(spec: &SupernetSpec) -> Totals {
    let cin = spec.head.conv_channels.unwrap_or_else(|| spec.final_channels());
    let k = spec.num_classes;
    Totals {
        macs: (cin * k) as u64,
        params: (cin * k + k) as u64,
        bitops: 0,
    }
}

/// Total MACs of `arch` in `spec`'s space.
pub fn count_macs(arch: &Architecture, spec: &SupernetSpec) -> Result<u64> {
    CostModel::new(spec)?.macs(arch)
}

/// BitOps summed over quantized convolutions.
pub fn count_bitops(arch: &Architecture, spec: &SupernetSpec) -> Result<u64> {
    CostModel::new(spec)?.bitops(arch)
}

/// Trainable scalars on the path of `arch`.
pub fn count_params(arch: &Architecture, spec: &SupernetSpec) -> Result<u64> {
    CostModel::new(spec)?.params(arch)
}

pub fn satisfies_constraint(arch: &Architecture, constraints: &[ConstraintSpec], model: &CostModel) -> Result<bool> {
    model.satisfies(arch, constraints)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub bitops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

/// Per-unit cost breakdown (stem, each choice block, head) with totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: Architecture,
    pub rows: Vec<CostRow>,
    pub total: CostRow,
}

impl CostReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let with_lat = self.total.latency_ms.is_some();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        write!(f, "{:<width$} {:>14} {:>12} {:>16}", "unit", "macs", "params", "bitops")?;
        if with_lat {
            write!(f, " {:>12}", "latency_ms")?;
        }
        writeln!(f)?;
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            write!(f, "{:<width$} {:>14} {:>12} {:>16}", r.name, r.macs, r.params, r.bitops)?;
            if let Some(l) = r.latency_ms {
                write!(f, " {l:>12.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
