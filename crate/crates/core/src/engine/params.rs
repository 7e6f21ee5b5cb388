use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Prefix lengths along the first two axes of a parameter; trailing axes are
/// always taken whole. Rank-1 parameters ignore `dim1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Extent {
    pub dim0: usize,
    pub dim1: usize,
}

impl Extent {
    pub fn new(dim0: usize, dim1: usize) -> Self {
        Self { dim0, dim1 }
    }

    pub fn full(shape: &[usize]) -> Self {
        Self {
            dim0: shape.first().copied().unwrap_or(1),
            dim1: shape.get(1).copied().unwrap_or(1),
        }
    }

    fn union(self, other: Extent) -> Extent {
        Extent {
            dim0: self.dim0.max(other.dim0),
            dim1: self.dim1.max(other.dim1),
        }
    }
}

/// Read-only prefix view `W[:dim0, :dim1, ...]` into shared storage.
#[derive(Clone, Copy, Debug)]
pub struct PrefixView<'a> {
    data: &'a [f32],
    full_shape: &'a [usize],
    extent: Extent,
}

impl<'a> PrefixView<'a> {
    pub fn shape(&self) -> Vec<usize> {
        let mut s = self.full_shape.to_vec();
        if let Some(d) = s.get_mut(0) {
            *d = self.extent.dim0;
        }
        if let Some(d) = s.get_mut(1) {
            *d = self.extent.dim1;
        }
        s
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    /// Backing storage of the full (maximum-size) tensor.
    pub fn storage(&self) -> &'a [f32] {
        self.data
    }

    fn inner(&self) -> usize {
        self.full_shape.iter().skip(2).product()
    }

    /// Element at `(i0, i1, flat trailing index)` of the view.
    pub fn get(&self, i0: usize, i1: usize, rest: usize) -> f32 {
        let s1 = self.full_shape.get(1).copied().unwrap_or(1);
        self.data[(i0 * s1 + i1) * self.inner() + rest]
    }

    pub fn to_tensor(&self) -> Tensor {
        let s1 = self.full_shape.get(1).copied().unwrap_or(1);
        let inner = self.inner();
        if self.extent == Extent::full(self.full_shape) {
            return Tensor::from_parts(self.shape(), self.data.to_vec());
        }
        let mut out = Vec::with_capacity(self.extent.dim0 * self.extent.dim1 * inner);
        for o in 0..self.extent.dim0 {
            let start = o * s1 * inner;
            out.extend_from_slice(&self.data[start..start + self.extent.dim1 * inner]);
        }
        Tensor::from_parts(self.shape(), out)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    touched: Option<Extent>,
}

impl Param {
    /// Region that received gradient since the last `zero_grad`.
    pub fn touched(&self) -> Option<Extent> {
        self.touched
    }
}

/// Flat registry of trainable tensors addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            touched: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn full_extent(&self, id: ParamId) -> Extent {
        Extent::full(self.get(id).shape())
    }

    pub fn view(&self, id: ParamId, extent: Extent) -> Result<PrefixView<'_>> {
        let t = self.get(id);
        let shape = t.shape();
        let max0 = shape.first().copied().unwrap_or(1);
        let max1 = shape.get(1).copied().unwrap_or(1);
        if extent.dim0 == 0 || extent.dim1 == 0 || extent.dim0 > max0 || extent.dim1 > max1 {
            bail!(
                InvalidSlice,
                "slice [{}, {}] of {} with shape {:?}",
                extent.dim0,
                extent.dim1,
                self.name(id),
                shape
            );
        }
        Ok(PrefixView {
            data: t.data(),
            full_shape: shape,
            extent,
        })
    }

    /// Adds a gradient laid out like `view(id, extent)` into the full-size
    /// gradient buffer of the parameter.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, extent: Extent, grad: &[f32]) {
        let p = &mut self.params[id.0];
        let shape = p.value.shape().to_vec();
        let s1 = shape.get(1).copied().unwrap_or(1);
        let inner: usize = shape.iter().skip(2).product();
        let buf = p.value.grad_or_zero();
        let row = extent.dim1 * inner;
        for o in 0..extent.dim0 {
            let dst = o * s1 * inner;
            for (d, g) in buf[dst..dst + row].iter_mut().zip(&grad[o * row..(o + 1) * row]) {
                *d += g;
            }
        }
        p.touched = Some(match p.touched {
            Some(t) => t.union(extent),
            None => extent,
        });
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
            p.touched = None;
        }
    }
}
