//! Dense row-major `f64` tensors and the seeded RNG used everywhere.
//!
//! Tensors are immutable-after-construction values; operations return new
//! tensors. The only sanctioned in-place mutation is through [`Tensor::data_mut`],
//! reserved for exclusive owners (optimizer steps, gradient accumulation).

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 8] = b"WCTENSOR";

/// Dense N-dimensional array of 64-bit reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a flat row-major data buffer.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// All-zero tensor with the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: vec![0.0; n] })
    }

    /// Tensor of the given shape with every element equal to `value`.
    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: vec![value; n] })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Exclusive in-place access. Callers must own the tensor exclusively;
    /// see the module notes on mutation.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major strides derived from the shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for i in (0..self.shape.len()).rev() {
            debug_assert!(index[i] < self.shape[i]);
            off += index[i] * stride;
            stride *= self.shape[i];
        }
        off
    }

    /// Multi-index of a flat offset (inverse of [`Tensor::offset`]).
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0usize; self.shape.len()];
        for i in (0..self.shape.len()).rev() {
            index[i] = offset % self.shape[i];
            offset /= self.shape[i];
        }
        index
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Sum of elementwise products of two same-shaped tensors.
    pub fn frobenius_inner(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "frobenius_inner")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|a| a * c).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&a| f(a)).collect() }
    }

    /// Seeded normal fill; `std` must be nonnegative.
    pub fn fill_normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        validate_shape(shape)?;
        if !(std >= 0.0) {
            return Err(Error::InvalidArgument(format!("normal std must be >= 0, got {std}")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal(mean, std)).collect();
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Seeded uniform fill over `[lo, hi)` (all-`lo` when `lo == hi`).
    pub fn fill_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        validate_shape(shape)?;
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("uniform bounds must satisfy lo <= hi, got [{lo}, {hi})")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Self { shape: shape.to_vec(), data })
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Writes the tensor in the raw fixture format: magic `WCTENSOR`,
    /// little-endian u32 rank, rank x little-endian u64 extents, then the
    /// row-major little-endian f64 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a tensor written by [`Tensor::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("tensor file shorter than its 8-byte magic".into()))?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}, expected {:?}",
                magic, TENSOR_MAGIC
            )));
        }
        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf).map_err(|_| Error::Format("tensor file truncated at rank".into()))?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank == 0 {
            return Err(Error::Format("tensor rank 0 is not allowed".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let mut ext = [0u8; 8];
            r.read_exact(&mut ext)
                .map_err(|_| Error::Format(format!("tensor file truncated at extent {i}")))?;
            shape.push(u64::from_le_bytes(ext) as usize);
        }
        validate_shape(&shape).map_err(|e| Error::Format(format!("bad extents in tensor file: {e}")))?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut val = [0u8; 8];
        for i in 0..n {
            r.read_exact(&mut val)
                .map_err(|_| Error::Format(format!("tensor payload truncated at element {i} of {n}")))?;
            data.push(f64::from_le_bytes(val));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after tensor payload".into()));
        }
        Tensor::new(&shape, data)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("empty shape list".into()));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidArgument(format!("all extents must be >= 1, got {shape:?}")));
    }
    Ok(())
}

/// Deterministic random generator: ChaCha8 keyed from a 64-bit seed.
///
/// The same seed yields a bit-identical sequence on every platform. Derived
/// streams (see [`Rng::derive`]) mix a stream id into the seed with the
/// SplitMix64 finalizer so per-item streams stay independent of draw order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named substream of this seed.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    /// Uniform draw from `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer draw from `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("validated std").sample(&mut self.inner)
    }

    /// Bernoulli draw with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p.clamp(0.0, 1.0))
    }

    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        slice.shuffle(&mut self.inner);
    }
}

/// SplitMix64 finalizer, used only to mix stream ids into seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
