//! Dense row-major tensors of `f64` and the seeded random generator the
//! rest of the crate builds on.
//!
//! The generator is xoshiro256** with its state filled from SplitMix64,
//! exactly as published by Blackman and Vigna. It is implemented here (rather
//! than taken from a platform RNG) so that a seed pins the same stream on
//! every platform, which the golden tests rely on.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64`, row-major.
///
/// `data.len()` always equals the product of `shape`, and every element is
/// finite after any operation in this module.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Elementwise binary operations accepted by [`Tensor::map_binary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor shape must have at least one extent".into()));
    }
    let mut n = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(n)
}

impl Tensor {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![0.0; n] })
    }

    /// Wraps `values` (row-major) in a tensor of the given shape.
    pub fn from_data(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if values.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite value {v} in tensor data")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major flat index of a coordinate tuple.
    pub fn flat_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.shape.len());
        let mut idx = 0;
        for (c, e) in coords.iter().zip(&self.shape) {
            debug_assert!(c < e);
            idx = idx * e + c;
        }
        idx
    }

    pub fn at(&self, coords: &[usize]) -> f64 {
        self.data[self.flat_index(coords)]
    }

    pub fn set(&mut self, coords: &[usize], v: f64) {
        let i = self.flat_index(coords);
        self.data[i] = v;
    }

    /// Same data viewed under a different shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?} ({n} elems)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Elementwise add/sub/mul over identically shaped tensors.
    pub fn map_binary(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
            })
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.map_binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.map_binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.map_binary(other, BinaryOp::Mul)
    }

    /// Every element multiplied by `c`.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::Value(format!("non-finite scale factor {c}")));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        })
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Tensor with elements drawn uniformly from `[lo, hi)`.
    pub fn rand_uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(Error::Range(format!("empty range [{lo}, {hi})")));
        }
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }
}

/// Deterministic xoshiro256** generator, seeded through SplitMix64.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        // SplitMix64 expansion of the 64-bit seed into the 256-bit state.
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        Rng { state: [next(), next(), next(), next()] }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, by rejection to avoid modulo bias.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (one sample per call, second discarded).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle of `items`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_shapes() {
        let t = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::zeros(&[1]).unwrap();
        assert_eq!(t.data(), &[0.0]);
        let t = Tensor::zeros(&[3, 1, 2]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.shape(), &[3, 1, 2]);
    }

    #[test]
    fn zeros_rejects_bad_shapes() {
        assert!(matches!(Tensor::zeros(&[]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn from_data_row_major() {
        let t = Tensor::from_data(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(&[1, 0]), 3.0);
        let t = Tensor::from_data(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(&[2]), 3.0);
    }

    #[test]
    fn from_data_rejects_mismatch_and_nonfinite() {
        assert!(matches!(
            Tensor::from_data(&[2, 2], vec![1.0, 2.0, 3.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::from_data(&[2], vec![1.0, f64::NAN]),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn row_major_indexing_law() {
        let (a, b, c) = (3, 4, 5);
        let t = Tensor::zeros(&[a, b, c]).unwrap();
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    assert_eq!(t.flat_index(&[i, j, k]), i * b * c + j * c + k);
                }
            }
        }
    }

    #[test]
    fn map_binary_basics() {
        let a = Tensor::from_data(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_data(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let z = Tensor::from_data(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(a.mul(&z).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
        let c = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(a.add(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn scale_basics() {
        let a = Tensor::from_data(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(a.scale(2.0).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(a.scale(1.0).unwrap(), a);
        assert_eq!(a.scale(0.0).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(a.scale(f64::INFINITY), Err(Error::Value(_))));
    }

    #[test]
    fn rand_uniform_range_and_determinism() {
        let mut rng = Rng::new(42);
        let t = Tensor::rand_uniform(&mut rng, &[4], -1.0, 1.0).unwrap();
        assert!(t.data().iter().all(|&v| (-1.0..1.0).contains(&v)));

        let mut r1 = Rng::new(42);
        let mut r2 = Rng::new(42);
        let a = Tensor::rand_uniform(&mut r1, &[16], -1.0, 1.0).unwrap();
        let b = Tensor::rand_uniform(&mut r2, &[16], -1.0, 1.0).unwrap();
        assert_eq!(a, b);

        let mut rng = Rng::new(7);
        assert!(matches!(
            Tensor::rand_uniform(&mut rng, &[2], 1.0, 1.0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn rand_uniform_mean() {
        // 3-sigma band for the mean of 1000 U(0,1) draws: 0.5 +/- 0.0274.
        let mut rng = Rng::new(123);
        let t = Tensor::rand_uniform(&mut rng, &[1000], 0.0, 1.0).unwrap();
        let mean = t.sum() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn rng_golden_stream() {
        // Pinned against an independent implementation of SplitMix64-seeded
        // xoshiro256**; guards the stream across platforms and refactors.
        let mut rng = Rng::new(0);
        let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            [
                11091344671253066420,
                13793997310169335082,
                1900383378846508768,
                7684712102626143532,
            ]
        );

        let mut rng = Rng::new(12345);
        let got: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        assert_eq!(
            got,
            [
                0.7438081631565894,
                0.13004553462783452,
                0.9633344930128545,
                0.048340114836345816,
            ]
        );
    }
}
