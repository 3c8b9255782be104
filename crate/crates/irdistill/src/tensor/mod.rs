//! Dense tensors, the autodiff tape, and the finite-difference oracle.

mod gradcheck;
mod graph;
mod tape;

pub use gradcheck::{compare_gradients, finite_difference_gradient, GradCompare, DEFAULT_STEP};
pub use graph::{kaiming_uniform, prefixed, uniform_init, xavier_uniform, Graph, Module};
pub use tape::{Fill, Pad, Tape, ValueId};

use crate::{Error, Result};
use std::fmt::{Debug, Display};
use std::io::Write;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar the engine is generic over: `f64` for gradient
/// checks, `f32` for training loops.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Convert from `f64` (used for constants and config values).
    fn f(v: f64) -> Self;
    /// Convert to `f64` (used for reporting and metrics).
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn f(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn f(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array in row-major order; feature maps use NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Build a tensor, checking that the shape matches the data length.
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); numel] }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Overwrite every element (used to force gates and scales in tests).
    pub fn fill(&mut self, v: F) {
        self.data.fill(v);
    }

    /// Reinterpret the same data under a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Convert element type (e.g. an `f64` oracle value into `f32` training data).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::f(v.as_f64())).collect(),
        }
    }

    /// Text dump: one header line `shape: d0 d1 ...`, then whitespace-separated
    /// values in row-major order, one line per trailing-dimension lane.
    pub fn dump(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "shape:")?;
        for d in &self.shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        let lane = *self.shape.last().unwrap_or(&1).max(&1);
        for row in self.data.chunks(lane) {
            let mut first = true;
            for v in row {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{v}")?;
                first = false;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Largest absolute difference between two equally shaped tensors.
pub fn max_abs_diff<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff: shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let r = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn dump_writes_shape_header_and_values() {
        let t = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "shape: 2 2\n1 2\n3 4\n");
    }

    #[test]
    fn cast_roundtrips_f64_to_f32() {
        let t = Tensor::new(&[3], vec![0.5f64, -1.25, 2.0]).unwrap();
        let f32t: Tensor<f32> = t.cast();
        assert_eq!(f32t.data(), &[0.5f32, -1.25, 2.0]);
    }
}
