//! Dense row-major tensors, a tape-based reverse-mode differentiation engine
//! and the binary `CTEN` file format.

mod cten;
mod gradcheck;
mod graph;
mod ops;

pub use cten::{decode_cten, encode_cten, read_cten, write_cten, CTEN_MAGIC, CTEN_VERSION};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId, Var};

use crate::error::{Error, Result};

/// Working precision of every tensor buffer.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> Real {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders axes so that `out.shape[i] == self.shape[order[i]]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        check_order(order, self.rank())?;
        Ok(permute_raw(self, order))
    }

    /// Undoes [`Tensor::permute`] with the same `order`.
    pub fn inverse_permute(&self, order: &[usize]) -> Result<Tensor> {
        check_order(order, self.rank())?;
        Ok(permute_raw(self, &invert_order(order)))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack of mismatched shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Axis order applied to a `(C, H, W)` feature map by one attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DimOrder([usize; 3]);

impl DimOrder {
    pub const CHW: DimOrder = DimOrder([0, 1, 2]);
    pub const HWC: DimOrder = DimOrder([1, 2, 0]);
    pub const WCH: DimOrder = DimOrder([2, 0, 1]);
    pub const CWH: DimOrder = DimOrder([0, 2, 1]);

    /// The four branch orders, in stream order.
    pub const BRANCHES: [DimOrder; 4] = [Self::CHW, Self::HWC, Self::WCH, Self::CWH];

    pub fn new(order: [usize; 3]) -> Result<Self> {
        check_order(&order, 3)?;
        Ok(DimOrder(order))
    }

    pub fn axes(&self) -> [usize; 3] {
        self.0
    }

    pub fn inverse(&self) -> DimOrder {
        let mut inv = [0; 3];
        for (i, &o) in self.0.iter().enumerate() {
            inv[o] = i;
        }
        DimOrder(inv)
    }

    /// The same permutation lifted over a leading batch axis.
    pub fn batched(&self) -> [usize; 4] {
        [0, self.0[0] + 1, self.0[1] + 1, self.0[2] + 1]
    }

    pub fn name(&self) -> &'static str {
        match self.0 {
            [0, 1, 2] => "CHW",
            [1, 2, 0] => "HWC",
            [2, 0, 1] => "WCH",
            [0, 2, 1] => "CWH",
            [1, 0, 2] => "HCW",
            _ => "WHC",
        }
    }
}

pub(crate) fn check_order(order: &[usize], rank: usize) -> Result<()> {
    if order.len() != rank {
        return Err(Error::Shape(format!(
            "permutation of length {} applied to rank-{rank} tensor",
            order.len()
        )));
    }
    let mut seen = vec![false; rank];
    for &o in order {
        if o >= rank || seen[o] {
            return Err(Error::Shape(format!("{order:?} is not a permutation of 0..{rank}")));
        }
        seen[o] = true;
    }
    Ok(())
}

pub(crate) fn invert_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            acc * d + i
        })
}

pub(crate) fn permute_raw(t: &Tensor, order: &[usize]) -> Tensor {
    let in_strides = strides(&t.shape);
    let out_shape: Vec<usize> = order.iter().map(|&o| t.shape[o]).collect();
    // stride in the source buffer for each output axis
    let src_strides: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let numel = t.data.len();
    let mut data = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        data.push(t.data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor { shape: out_shape, data }
}
