//! Dense row-major `f32` tensors.
//!
//! Reductions accumulate in `f64` strictly left to right over the reduced
//! elements (in row-major order) and round once at the end, so a given input
//! always produces the same bits on one platform.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Semantic labels for the NCHW layout used by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    /// Position of this axis in a rank-4 NCHW tensor.
    pub fn nchw(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }

    /// Position of this axis in a rank-3 CHW tensor (a single sample).
    pub fn chw(self) -> Option<usize> {
        match self {
            Axis::Batch => None,
            Axis::Channel => Some(0),
            Axis::Height => Some(1),
            Axis::Width => Some(2),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        let mut n: usize = 1;
        for &d in &dims {
            n = n.checked_mul(d).ok_or_else(|| Error::ShapeOverflow(dims.clone()))?;
        }
        // Flat indices are stored as u32 in pooling argmax buffers and
        // serialized dims are u32.
        if n > u32::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::ShapeOverflow(dims));
        }
        Ok(Shape(dims))
    }

    pub fn nchw(b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Shape::new(vec![b, c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.0.len() {
            return Err(Error::mismatch("flat_index", &self.0, coords));
        }
        let mut idx = 0;
        for ((&c, &d), s) in coords.iter().zip(&self.0).zip(self.strides()) {
            if c >= d {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {coords:?} out of bounds for shape {:?}",
                    self.0
                )));
            }
            idx += c * s;
        }
        Ok(idx)
    }

    pub fn coords(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.numel() {
            return Err(Error::InvalidArgument(format!(
                "flat index {flat} out of bounds for shape {:?}",
                self.0
            )));
        }
        let mut out = vec![0; self.0.len()];
        for (o, s) in out.iter_mut().zip(self.strides()) {
            *o = flat / s;
            flat %= s;
        }
        Ok(out)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let shape = Shape::new(shape.to_vec())?;
        let data = vec![0.0; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Tensor::full"));
        }
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(shape.to_vec())?;
        if shape.numel() != data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.0,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec"));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Layer kernels use this
    /// on buffers they produced themselves; callers validate with
    /// [`Tensor::check_finite`] at stage boundaries.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn shape_obj(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the backing buffer. Only the optimizer and
    /// in-place initializers should write through this.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, coords: &[usize]) -> Result<f32> {
        Ok(self.data[self.shape.flat_index(coords)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let new = Shape::new(shape.to_vec())?;
        if new.numel() != self.data.len() {
            return Err(Error::mismatch("reshape", self.shape.dims(), shape));
        }
        Ok(Tensor {
            shape: new,
            data: self.data,
        })
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::mismatch(
                "elementwise",
                self.shape.dims(),
                other.shape.dims(),
            ));
        }
        let f = match op {
            BinaryOp::Add => |a: f32, b: f32| a + b,
            BinaryOp::Sub => |a: f32, b: f32| a - b,
            BinaryOp::Mul => |a: f32, b: f32| a * b,
        };
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor::from_parts(self.shape.clone(), data);
        out.check_finite("elementwise")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| v * factor).collect();
        let out = Tensor::from_parts(self.shape.clone(), data);
        out.check_finite("scale")?;
        Ok(out)
    }

    /// Adds `bias[c]` to every element of channel `c` of an NCHW or CHW tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let channel_axis = match self.rank() {
            4 => 1,
            3 => 0,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "channel bias needs a rank-3 or rank-4 tensor, got {:?}",
                    self.shape()
                )))
            }
        };
        let c = self.shape.dim(channel_axis);
        if bias.shape() != [c] {
            return Err(Error::mismatch("add_channel_bias", &[c], bias.shape()));
        }
        let inner: usize = self.shape.dims()[channel_axis + 1..].iter().product();
        let mut data = self.data.clone();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let b = bias.data[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let out = Tensor::from_parts(self.shape.clone(), data);
        out.check_finite("add_channel_bias")?;
        Ok(out)
    }

    /// Reduces over `axes`, removing them from the shape. Reducing every
    /// axis yields a shape `[1]` tensor.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Tensor> {
        if axes.is_empty() {
            return Err(Error::EmptyAxes);
        }
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::AxisOutOfRange { axis: a, rank });
            }
            reduced[a] = true;
        }
        let dims = self.shape.dims();
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).collect();
        let out_dims: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&a| dims[a]).collect()
        };
        let out_shape = Shape::new(out_dims)?;
        let out_strides = out_shape.strides();
        let count = self.numel() / out_shape.numel();

        let mut acc = match op {
            ReduceOp::Max => vec![f64::NEG_INFINITY; out_shape.numel()],
            _ => vec![0.0f64; out_shape.numel()],
        };
        // Walk the input in row-major order so each output accumulates its
        // contributions in a fixed sequence.
        let mut coords = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for (k, &a) in kept.iter().enumerate() {
                o += coords[a] * out_strides[k];
            }
            let v = v as f64;
            match op {
                ReduceOp::Max => {
                    if v > acc[o] {
                        acc[o] = v;
                    }
                }
                _ => acc[o] += v,
            }
            for a in (0..rank).rev() {
                coords[a] += 1;
                if coords[a] < dims[a] {
                    break;
                }
                coords[a] = 0;
            }
        }
        if op == ReduceOp::Mean {
            acc.iter_mut().for_each(|v| *v /= count as f64);
        }
        let out = Tensor::from_parts(out_shape, acc.into_iter().map(|v| v as f32).collect());
        out.check_finite("reduce")?;
        Ok(out)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &v| acc + v as f64)
    }

    /// Writes the checkpoint tensor record: name (u32 length + UTF-8),
    /// rank (u32), dims (u32 each), then little-endian `f32` data.
    pub fn write_record<W: Write>(&self, name: &str, w: &mut W) -> std::io::Result<()> {
        write_str(w, name)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in self.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_record<R: Read>(r: &mut R) -> std::io::Result<(String, Tensor)> {
        let name = read_str(r)?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(invalid_data(format!("tensor record `{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)? as usize);
        }
        let shape = Shape::new(dims).map_err(|e| invalid_data(e.to_string()))?;
        let mut bytes = vec![0u8; shape.numel() * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid_data(format!("tensor record `{name}` holds non-finite data")));
        }
        Ok((name, Tensor { shape, data }))
    }
}

const LANES: usize = 8;

fn lanes_total(acc: [f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// `Σ f(x_i, y_i)` in `f64` with interleaved accumulators combined in a
/// fixed order: deterministic, but not the sequential summation order.
#[inline]
fn lane_sum(xs: &[f32], ys: &[f32], f: impl Fn(f32, f32) -> f64) -> f64 {
    let mut acc = [0f64; LANES];
    let mut xc = xs.chunks_exact(LANES);
    let mut yc = ys.chunks_exact(LANES);
    for (x, y) in (&mut xc).zip(&mut yc) {
        for l in 0..LANES {
            acc[l] += f(x[l], y[l]);
        }
    }
    for (l, (&x, &y)) in xc.remainder().iter().zip(yc.remainder()).enumerate() {
        acc[l] += f(x, y);
    }
    lanes_total(acc)
}

pub(crate) fn sum_f64(xs: &[f32]) -> f64 {
    lane_sum(xs, xs, |x, _| x as f64)
}

pub(crate) fn sum_sq_dev_f64(xs: &[f32], mean: f64) -> f64 {
    lane_sum(xs, xs, |x, _| {
        let d = x as f64 - mean;
        d * d
    })
}

pub(crate) fn dot_f64(xs: &[f32], ys: &[f32]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    lane_sum(xs, ys, |x, y| x as f64 * y as f64)
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(invalid_data(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| invalid_data(e.to_string()))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn invalid_data(msg: String) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_examples() {
        assert_eq!(Tensor::zeros(&[2, 2]).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::zeros(&[1]).unwrap().data(), &[0.0]);
        let t = Tensor::zeros(&[3, 1, 1]).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[0.0; 3]);
    }

    #[test]
    fn zeros_rejects_bad_shapes() {
        assert!(matches!(Tensor::zeros(&[]), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::InvalidShape(_))));
        assert!(matches!(
            Tensor::zeros(&[usize::MAX, 2]),
            Err(Error::ShapeOverflow(_))
        ));
        assert!(matches!(
            Tensor::zeros(&[1 << 20, 1 << 20]),
            Err(Error::ShapeOverflow(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);

        let x = Tensor::from_vec(&[3], vec![1.5, -2.0, 7.0]).unwrap();
        let z = Tensor::zeros(&[3]).unwrap();
        assert!(x.mul(&z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(x.sub(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(&[2]).unwrap();
        let b = Tensor::zeros(&[1, 2]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn overflow_to_infinity_is_an_error() {
        let a = Tensor::full(&[1], f32::MAX).unwrap();
        assert!(matches!(a.add(&a), Err(Error::NonFinite(_))));
        assert!(Tensor::from_vec(&[1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn reduce_examples() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.reduce(&[0], ReduceOp::Sum).unwrap().data(), &[6.0]);
        let t = Tensor::from_vec(&[2], vec![2.0, 4.0]).unwrap();
        assert_eq!(t.reduce(&[0], ReduceOp::Mean).unwrap().data(), &[3.0]);
        let t = Tensor::from_vec(&[3], vec![-1.0, 5.0, 2.0]).unwrap();
        assert_eq!(t.reduce(&[0], ReduceOp::Max).unwrap().data(), &[5.0]);
    }

    #[test]
    fn reduce_over_spatial_axes() {
        let t = Tensor::from_vec(&[2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let s = t.reduce(&[1, 2], ReduceOp::Sum).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[10.0, 26.0]);
        let m = t.reduce(&[0], ReduceOp::Max).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[5., 6., 7., 8.]);
    }

    #[test]
    fn reduce_errors() {
        let t = Tensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(t.reduce(&[], ReduceOp::Sum), Err(Error::EmptyAxes)));
        assert!(matches!(
            t.reduce(&[2], ReduceOp::Sum),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn channel_bias_broadcast() {
        let x = Tensor::zeros(&[2, 3, 1, 2]).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.add_channel_bias(&b).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 3., 3., 1., 1., 2., 2., 3., 3.]
        );
        assert!(x.add_channel_bias(&Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn record_round_trip() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 3.25, 1e-30, 7.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_record("layer.weight", &mut buf).unwrap();
        assert_eq!(&buf[0..4], &12u32.to_le_bytes());
        let (name, back) = Tensor::read_record(&mut buf.as_slice()).unwrap();
        assert_eq!(name, "layer.weight");
        assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn truncated_record_fails() {
        let t = Tensor::zeros(&[4]).unwrap();
        let mut buf = Vec::new();
        t.write_record("x", &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_record(&mut buf.as_slice()).is_err());
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..6, 1..5)
    }

    proptest! {
        #[test]
        fn flat_index_round_trips(dims in shape_strategy(), seed in any::<u64>()) {
            let shape = Shape::new(dims).unwrap();
            let flat = (seed as usize) % shape.numel();
            let coords = shape.coords(flat).unwrap();
            prop_assert_eq!(shape.flat_index(&coords).unwrap(), flat);
            let strides = shape.strides();
            let manual: usize = coords.iter().zip(&strides).map(|(c, s)| c * s).sum();
            prop_assert_eq!(manual, flat);
        }

        #[test]
        fn mean_of_constant_is_exact(dims in shape_strategy(), c in -1.0e6f32..1.0e6) {
            let t = Tensor::full(&dims, c).unwrap();
            let axes: Vec<usize> = (0..dims.len()).collect();
            let m = t.reduce(&axes, ReduceOp::Mean).unwrap();
            prop_assert_eq!(m.data()[0].to_bits(), c.to_bits());
        }

        #[test]
        fn sum_is_order_independent(
            values in prop::collection::vec(-100.0f32..100.0, 1..64),
            rot in 0usize..64,
        ) {
            // f64 accumulation of these f32 inputs is exact, so any
            // permutation rounds to the same f32.
            let n = values.len();
            let t = Tensor::from_vec(&[n], values.clone()).unwrap();
            let a = t.reduce(&[0], ReduceOp::Sum).unwrap();
            let mut permuted = values;
            permuted.reverse();
            permuted.rotate_left(rot % n);
            let b = Tensor::from_vec(&[n], permuted).unwrap().reduce(&[0], ReduceOp::Sum).unwrap();
            prop_assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        }
    }
}
