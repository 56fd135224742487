//! Dense f32 tensors in row-major layout, plus the deterministic RNG used
//! everywhere randomness is needed.
//!
//! Activations and convolution weights use NCHW order. Every operation here
//! is a pure function of its inputs (and an explicit [`Rng`]), with a fixed
//! accumulation order, so repeated calls are bit-identical.

use std::io::{Read, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense N-dimensional array of f32 values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor. The shape must be nonempty with every dim >= 1.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor from existing data; the element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerics(format!(
                    "{context}: non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    /// Serializes as: rank (u32 LE), each dim (u32 LE), then the f32 payload (LE).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads back the format written by [`Tensor::write_to`].
    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        check_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; n];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated tensor payload".into()))?;
            *v = f32::from_le_bytes(buf);
        }
        Ok(Tensor { shape, data })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("empty shape".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero-sized dim in {shape:?}")));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated tensor header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Largest absolute elementwise difference; shapes must already match.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff on mismatched shapes");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

/// Restorable RNG position, stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// Deterministic, platform-independent random source (ChaCha8 stream).
///
/// The same seed yields the same sample sequence on every platform, and the
/// stream position can be saved and restored for bit-identical resumption.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    /// Does not advance this generator.
    pub fn derive(&self, label: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(label)))
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(state: RngState) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
        Rng {
            seed: state.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) via rejection sampling (no modulo bias).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller; two uniforms per sample).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            perm.swap(i, j);
        }
        perm
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Tensor of i.i.d. normal samples with the given mean and standard deviation.
pub fn randn(shape: &[usize], rng: &mut Rng, mean: f32, std: f32) -> Result<Tensor> {
    if std < 0.0 {
        return Err(Error::Value(format!("negative std {std}")));
    }
    let mut t = Tensor::zeros(shape)?;
    for v in t.data_mut() {
        *v = (mean as f64 + std as f64 * rng.normal()) as f32;
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Elementwise binary op. Broadcast is restricted to bias-style patterns:
/// `b` must either match `a`'s shape exactly, or be rank-1 `[C]` against a
/// rank-4 `[N, C, H, W]` tensor (per channel), or rank-1 `[K]` against a
/// rank-2 `[N, K]` tensor (per column). The result always has `a`'s shape.
pub fn ew_binary(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor> {
    let mut out = a.clone();
    ew_binary_into(&mut out, b, kind)?;
    out.check_finite("ew_binary")?;
    Ok(out)
}

fn ew_binary_into(a: &mut Tensor, b: &Tensor, kind: BinaryKind) -> Result<()> {
    let apply = |x: &mut f32, y: f32| match kind {
        BinaryKind::Add => *x += y,
        BinaryKind::Sub => *x -= y,
        BinaryKind::Mul => *x *= y,
    };
    if a.shape() == b.shape() {
        for (x, &y) in a.data.iter_mut().zip(&b.data) {
            apply(x, y);
        }
        return Ok(());
    }
    match (a.shape.len(), b.shape.len()) {
        (4, 1) if b.shape[0] == a.shape[1] => {
            let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
            let plane = h * w;
            for ni in 0..n {
                for ci in 0..c {
                    let y = b.data[ci];
                    let base = (ni * c + ci) * plane;
                    for x in &mut a.data[base..base + plane] {
                        apply(x, y);
                    }
                }
            }
            Ok(())
        }
        (2, 1) if b.shape[0] == a.shape[1] => {
            let k = a.shape[1];
            for row in a.data.chunks_exact_mut(k) {
                for (x, &y) in row.iter_mut().zip(&b.data) {
                    apply(x, y);
                }
            }
            Ok(())
        }
        _ => Err(Error::Shape(format!(
            "cannot broadcast {:?} against {:?}",
            b.shape, a.shape
        ))),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ew_binary(a, b, BinaryKind::Add)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ew_binary(a, b, BinaryKind::Sub)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ew_binary(a, b, BinaryKind::Mul)
}

/// Scales every element by a constant.
pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let mut out = a.clone();
    for v in out.data_mut() {
        *v *= c;
    }
    out
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

/// `out[m][n] (+)= sum_k a[m][k] * b[k][n]` with a fixed i-k-j loop order, so
/// every output element accumulates in increasing-k order regardless of size.
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Standard matrix product of `[M, K] x [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank-2 tensors, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n])?;
    gemm_acc(m, k, n, &a.data, &b.data, &mut out.data);
    out.check_finite("matmul")?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

/// Pads the two spatial dims of an NCHW tensor by `pad` on every side,
/// filling the border with `value`.
pub fn pad2d(x: &Tensor, pad: usize, value: f32) -> Result<Tensor> {
    if x.shape.len() != 4 {
        return Err(Error::Shape(format!(
            "pad2d needs NCHW input, got {:?}",
            x.shape
        )));
    }
    if pad == 0 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::from_vec(&[n, c, hp, wp], vec![value; n * c * hp * wp])?;
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let src = ((ni * c + ci) * h + hi) * w;
                let dst = ((ni * c + ci) * hp + hi + pad) * wp + pad;
                out.data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
            }
        }
    }
    Ok(out)
}
