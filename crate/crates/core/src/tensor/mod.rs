//! Dense rank-4 tensors and reverse-mode differentiation for the small
//! operator set the detector needs.
//!
//! Values are `f64` throughout. Operators are pure functions recorded on a
//! [`Tape`]; the reverse pass replays them in exact reverse order and
//! accumulates gradients for trainable parameters only.

pub(crate) mod ops;
mod tape;

pub mod gradcheck;

pub use ops::{conv_out_len, OpCounters, RoiBox};
pub use tape::{NodeId, ParamGrad, ParamId, Tape, TapeCost};

use crate::error::Error;

/// Real scalar type used by every numeric path in the crate.
pub type Real = f64;

/// Shape of a rank-4 tensor: batch, channels, rows, cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Shape of a flat per-channel vector (1, c, 1, 1).
    pub fn vector(c: usize) -> Self {
        Shape4 { n: 1, c, h: 1, w: 1 }
    }

    /// Shape of a row matrix (n, c, 1, 1), used for fc activations.
    pub fn rows(n: usize, c: usize) -> Self {
        Shape4 { n, c, h: 1, w: 1 }
    }

    pub fn scalar() -> Self {
        Shape4 { n: 1, c: 1, h: 1, w: 1 }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one channel plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Flat NCHW offset of one element.
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array in NCHW layout. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<Real>,
}

impl Tensor4 {
    /// Checked constructor: validates length and rejects NaN/Inf entries.
    pub fn new(shape: Shape4, data: Vec<Real>) -> Result<Self, Error> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: pos, value: data[pos] });
        }
        Ok(Tensor4 { shape, data })
    }

    /// Fast constructor: the caller guarantees length and finiteness.
    pub fn from_raw_unchecked(shape: Shape4, data: Vec<Real>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor4 { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { data: vec![0.0; shape.numel()], shape }
    }

    pub fn full(shape: Shape4, v: Real) -> Self {
        Tensor4 { data: vec![v; shape.numel()], shape }
    }

    /// Per-channel vector (1, c, 1, 1) from a slice.
    pub fn from_vector(v: &[Real]) -> Self {
        Tensor4 { shape: Shape4::vector(v.len()), data: v.to_vec() }
    }

    pub fn scalar_value(v: Real) -> Self {
        Tensor4 { shape: Shape4::scalar(), data: vec![v] }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> Real {
        let s = &self.shape;
        debug_assert!(n < s.n && c < s.c && y < s.h && x < s.w);
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// One channel plane of one batch entry.
    pub fn plane(&self, n: usize, c: usize) -> &[Real] {
        let s = &self.shape;
        let start = (n * s.c + c) * s.plane();
        &self.data[start..start + s.plane()]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Shape4) -> Result<Self, Error> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        Ok(Tensor4 { shape, data: self.data.clone() })
    }

    /// Round every entry through f32, the archive precision. Values that went
    /// through this are preserved bit-for-bit by a save/load round trip.
    pub fn quantized_f32(&self) -> Self {
        let data = self.data.iter().map(|&v| v as f32 as Real).collect();
        Tensor4 { shape: self.shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Real {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}
