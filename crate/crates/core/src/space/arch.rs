use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::spec::SupernetSpec;
use crate::error::{bail, Error, Result};

/// Per-block choice: indices into the block's variant, channel-multiplier and
/// bit-pair lists. Axes a block does not search stay at 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Gene {
    pub variant: u8,
    pub channel: u8,
    pub quant: u8,
}

impl Gene {
    pub const fn new(variant: u8, channel: u8, quant: u8) -> Self {
        Self {
            variant,
            channel,
            quant,
        }
    }

    pub fn variant(v: u8) -> Self {
        Self::new(v, 0, 0)
    }

    fn axis(&self, i: usize) -> usize {
        match i {
            0 => self.variant as usize,
            1 => self.channel as usize,
            _ => self.quant as usize,
        }
    }
}

impl fmt::Display for Gene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.variant, self.channel, self.quant)
    }
}

impl FromStr for Gene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_gene(s, 0)
    }
}

fn parse_gene(s: &str, offset: usize) -> Result<Gene> {
    let mut parts = [0u8; 3];
    let mut pos = offset;
    let fields: Vec<&str> = s.split('.').collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            position: offset,
            message: format!("gene {s:?} must have the form v.c.q"),
        });
    }
    for (slot, field) in parts.iter_mut().zip(&fields) {
        if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::Parse {
                position: pos,
                message: format!("expected a gene index, found {field:?}"),
            });
        }
        *slot = field.parse().map_err(|_| Error::Parse {
            position: pos,
            message: format!("gene index {field} out of range"),
        })?;
        pos += field.len() + 1;
    }
    Ok(Gene::new(parts[0], parts[1], parts[2]))
}

/// One point of the search space: a gene per choice block.
///
/// The text form joins genes with `-`, e.g. `0.0.0-3.0.0-1.0.0`; an
/// architecture with no choice blocks encodes as the empty string.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Architecture {
    genes: Vec<Gene>,
}

impl Architecture {
    pub fn new(genes: Vec<Gene>) -> Self {
        Self { genes }
    }

    /// Every block takes the same gene.
    pub fn uniform(blocks: usize, gene: Gene) -> Self {
        Self::new(vec![gene; blocks])
    }

    pub fn genes(&self) -> &[Gene] {
        &self.genes
    }

    pub fn genes_mut(&mut self) -> &mut [Gene] {
        &mut self.genes
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    pub fn encode(&self) -> String {
        self.to_string()
    }

    pub fn decode(text: &str) -> Result<Self> {
        text.parse()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.genes.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s_trim = s.trim_end_matches('\n');
        if s_trim.is_empty() {
            return Ok(Self::default());
        }
        let mut genes = Vec::new();
        let mut offset = 0;
        for part in s_trim.split('-') {
            genes.push(parse_gene(part, offset)?);
            offset += part.len() + 1;
        }
        Ok(Self { genes })
    }
}

impl Serialize for Architecture {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Shape of the discrete space: the number of choices per block and axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    axes: Vec<[usize; 3]>,
}

impl SearchSpace {
    pub fn new(axes: Vec<[usize; 3]>) -> Result<Self> {
        if axes.iter().flatten().any(|&n| n == 0 || n > u8::MAX as usize + 1) {
            bail!(InvalidSpec, "every axis needs between 1 and 256 choices");
        }
        Ok(Self { axes })
    }

    /// `blocks` blocks, each with `variants` building-block choices only.
    pub fn uniform_blocks(blocks: usize, variants: usize) -> Result<Self> {
        Self::new(vec![[variants, 1, 1]; blocks])
    }

    pub fn from_spec(spec: &SupernetSpec) -> Result<Self> {
        Self::new(spec.blocks()?.iter().map(|b| b.candidates.axes()).collect())
    }

    pub fn num_blocks(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self, block: usize) -> [usize; 3] {
        self.axes[block]
    }

    pub fn block_choices(&self, block: usize) -> usize {
        self.axes[block].iter().product()
    }

    /// Product of per-block candidate counts, saturating at `u128::MAX`.
    pub fn cardinality(&self) -> u128 {
        self.axes
            .iter()
            .fold(1u128, |acc, a| acc.saturating_mul(a.iter().product::<usize>() as u128))
    }

    pub fn contains(&self, arch: &Architecture) -> bool {
        self.check(arch).is_ok()
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        if arch.len() != self.axes.len() {
            bail!(
                InvalidArchitecture,
                "architecture has {} genes, space has {} blocks",
                arch.len(),
                self.axes.len()
            );
        }
        for (i, (g, a)) in arch.genes().iter().zip(&self.axes).enumerate() {
            for (axis, &n) in a.iter().enumerate() {
                if g.axis(axis) >= n {
                    bail!(InvalidArchitecture, "block {i}: gene {g} outside {a:?}");
                }
            }
        }
        Ok(())
    }

    /// Gene with flat index `i` in `0..block_choices(block)`.
    pub fn gene_at(&self, block: usize, i: usize) -> Gene {
        let [_, nc, nq] = self.axes[block];
        Gene::new((i / (nc * nq)) as u8, ((i / nq) % nc) as u8, (i % nq) as u8)
    }

    pub fn gene_index(&self, block: usize, g: Gene) -> usize {
        let [_, nc, nq] = self.axes[block];
        (g.variant as usize * nc + g.channel as usize) * nq + g.quant as usize
    }

    /// Every gene of one block in flat-index order.
    pub fn block_genes(&self, block: usize) -> impl Iterator<Item = Gene> + '_ {
        (0..self.block_choices(block)).map(move |i| self.gene_at(block, i))
    }

    /// Architecture with flat index `i` in mixed radix over the blocks
    /// (block 0 most significant). `None` once `i` exceeds the cardinality.
    pub fn arch_at(&self, mut i: u128) -> Option<Architecture> {
        let mut genes = vec![Gene::default(); self.axes.len()];
        for b in (0..self.axes.len()).rev() {
            let n = self.block_choices(b) as u128;
            genes[b] = self.gene_at(b, (i % n) as usize);
            i /= n;
        }
        (i == 0).then(|| Architecture::new(genes))
    }

    /// Exhaustive enumeration; only sensible for small spaces.
    pub fn enumerate(&self) -> impl Iterator<Item = Architecture> + '_ {
        let total = self.cardinality();
        (0..total).filter_map(move |i| self.arch_at(i))
    }
}
