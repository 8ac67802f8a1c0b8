//! Dense row-major tensor.
//!
//! Data lives behind an `Arc` so cloning a tensor into an autodiff tape (or
//! across evaluation threads) is cheap; the optimizer mutates through
//! `Arc::make_mut`, which is in-place once no tape holds a reference.

use std::sync::Arc;

use rand_chacha::rand_core::RngCore;

use super::element::Element;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor, validating shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Self {
            shape,
            data: Arc::new(data),
        };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    /// Internal constructor for op outputs; caller checks finiteness with
    /// an op-specific context string.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![E::ZERO; numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![E::ONE; numel])
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    /// Gaussian init, drawn as f64 via Box-Muller so f32 and f64 models
    /// consume the RNG stream identically.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl RngCore) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1 = unit_open(rng);
            let u2 = unit_open(rng);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            data.push(E::from_f64(r * c * std));
            if data.len() < numel {
                data.push(E::from_f64(r * s * std));
            }
        }
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access; copies the buffer only if another handle still
    /// shares it.
    pub fn data_mut(&mut self) -> &mut [E] {
        let v: &mut Vec<E> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if E::finite_slice(&self.data) {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    /// Exact bit equality, used by growth/determinism invariants.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        )
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * E::BYTES);
        for v in self.data.iter() {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * E::BYTES {
            return Err(Error::shape(format!(
                "byte payload {} does not match shape {:?} ({} bytes expected)",
                bytes.len(),
                shape,
                numel * E::BYTES
            )));
        }
        let data = bytes.chunks_exact(E::BYTES).map(E::read_le).collect();
        Ok(Self::from_parts(shape, data))
    }

    /// Max |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn unit_open(rng: &mut impl RngCore) -> f64 {
    // (0, 1]: avoids ln(0).
    let x = rng.next_u64() >> 11;
    (x as f64 + 1.0) / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::<f64>::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn le_bytes_round_trip() {
        let rng = &mut RunRng::new(7).stream("t");
        let t = Tensor::<f32>::randn(&[3, 4], 1.0, rng);
        let bytes = t.to_le_bytes();
        let back = Tensor::<f32>::from_le_bytes(vec![3, 4], &bytes).unwrap();
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn randn_stream_identical_across_dtypes() {
        let mut r1 = RunRng::new(3).stream("init");
        let mut r2 = RunRng::new(3).stream("init");
        let a = Tensor::<f32>::randn(&[8], 0.5, &mut r1);
        let b = Tensor::<f64>::randn(&[8], 0.5, &mut r2);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
