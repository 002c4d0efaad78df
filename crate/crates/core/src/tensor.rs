//! Dense rank-4 `f64` tensors in `(n, c, h, w)` row-major order, plus the
//! `.ten` on-disk format.
//!
//! Layout of a `.ten` file (all integers and floats little-endian):
//!
//! ```text
//! b"PPTN" | u32 version = 1 | u32 rank | rank x u64 dims | f64 payload
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TEN_MAGIC: &[u8; 4] = b"PPTN";
pub const TEN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    /// A `1 x len x 1 x 1` channel vector.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, [n, c, h, w]: [usize; 4]) -> usize {
        let s = self.shape.strides();
        n * s[0] + c * s[1] + h * s[2] + w
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.index(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: f64) {
        let i = self.index(idx);
        self.data[i] = v;
    }

    /// Value of a `1x1x1x1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Sample `i` of the batch as a `1 x c x h x w` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.shape.numel() / self.shape.n().max(1);
        Tensor {
            shape: Shape::new(1, self.shape.c(), self.shape.h(), self.shape.w()),
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape.0[1..] != s.0[1..] {
                return Err(Error::shape("stack", s, t.shape));
            }
            n += t.shape.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c(), s.h(), s.w()),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TEN_MAGIC)?;
        w.write_all(&TEN_VERSION.to_le_bytes())?;
        self.write_body(&mut w)
    }

    /// Rank, dims and payload, without the file header. Shared with the
    /// checkpoint format.
    pub(crate) fn write_body(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&4u32.to_le_bytes())?;
        for d in self.shape.0 {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TEN_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != TEN_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        Tensor::read_body(&mut r)
    }

    /// Ranks below 4 are accepted and left-padded with unit dimensions.
    pub(crate) fn read_body(r: &mut impl Read) -> Result<Tensor> {
        let rank = read_u32(r)? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("rank {rank} exceeds 4")));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims[4 - rank + i] = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Format("dimension overflows usize".into()))?;
        }
        let shape = Shape(dims);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor too large".into()))?;
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let f = std::fs::File::open(path)?;
        Tensor::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
        assert!(Tensor::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 8]).is_ok());
    }

    #[test]
    fn ten_header_layout() {
        let t = Tensor::vector(&[1.5, -2.0]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"PPTN");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(buf.len(), 12 + 4 * 8 + 2 * 8);
        assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn low_rank_files_are_padded() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"PPTN");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&3u64.to_le_bytes());
        for i in 0..6 {
            buf.extend_from_slice(&(i as f64).to_le_bytes());
        }
        let t = Tensor::read_from(&buf[..]).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 3));
        assert_eq!(t.at([0, 0, 1, 2]), 5.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(Tensor::read_from(&buf[..]), Err(Error::Format(_))));
    }
}
