//! Dense n-dimensional tensors, real or complex, row-major.
//!
//! Complex tensors store interleaved `[re, im]` pairs in the same scalar
//! buffer, so a complex tensor of N elements holds 2N scalars. Shape and
//! element counts always refer to logical elements, not scalars.

mod fft;
mod io;

pub use fft::{fft2, ifft2};
pub use io::{load_tensor, save_tensor, MAGIC, VERSION};

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real,
    Complex,
}

impl Dtype {
    /// Scalars per element.
    pub fn width(self) -> usize {
        match self {
            Dtype::Real => 1,
            Dtype::Complex => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    dtype: Dtype,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Real,
            data: vec![T::zero(); n],
        }
    }

    pub fn zeros_complex(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Complex,
            data: vec![T::zero(); 2 * n],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor {
            shape: other.shape.clone(),
            dtype: other.dtype,
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Real,
            data: vec![v; n],
        }
    }

    /// Real tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "buffer of {} scalars does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Real,
            data,
        })
    }

    /// Complex tensor from an interleaved `[re, im, re, im, ...]` buffer.
    pub fn from_interleaved(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != 2 * n {
            return Err(Error::Shape(format!(
                "buffer of {} scalars does not fill complex shape {:?} ({} scalars)",
                data.len(),
                shape,
                2 * n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Complex,
            data,
        })
    }

    pub fn from_complex(shape: &[usize], elems: &[Complex<T>]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if elems.len() != n {
            return Err(Error::Shape(format!(
                "{} complex elements do not fill shape {:?} ({} elements)",
                elems.len(),
                shape,
                n
            )));
        }
        let mut data = Vec::with_capacity(2 * n);
        for z in elems {
            data.push(z.re);
            data.push(z.im);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Complex,
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    /// Logical element count (pairs count once for complex tensors).
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    pub fn to_complex_vec(&self) -> Result<Vec<Complex<T>>> {
        if self.dtype != Dtype::Complex {
            return Err(Error::Dtype("expected a complex tensor".into()));
        }
        Ok(self
            .data
            .chunks_exact(2)
            .map(|p| Complex::new(p[0], p[1]))
            .collect())
    }

    /// Lift a real tensor to complex with zero imaginary part.
    pub fn to_complex(&self) -> Result<Self> {
        if self.dtype != Dtype::Real {
            return Err(Error::Dtype("tensor is already complex".into()));
        }
        let mut data = Vec::with_capacity(2 * self.data.len());
        for &v in &self.data {
            data.push(v);
            data.push(T::zero());
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: Dtype::Complex,
            data,
        })
    }

    /// Elementwise complex magnitude as a real tensor. Identity on real input
    /// would be wrong (sign), so real input is rejected.
    pub fn magnitude(&self) -> Result<Self> {
        if self.dtype != Dtype::Complex {
            return Err(Error::Dtype("magnitude needs a complex tensor".into()));
        }
        let data = self
            .data
            .chunks_exact(2)
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: Dtype::Real,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_layout(&self, other: &Self, what: &str) -> Result<()> {
        if self.dtype != other.dtype {
            return Err(Error::Dtype(format!("{what}: dtype mismatch")));
        }
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_layout(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_layout(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data,
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Multiply by a real mask elementwise; for complex tensors the mask
    /// applies to both components of each element.
    pub fn mask_mul(&self, mask: &Tensor<T>) -> Result<Self> {
        if mask.dtype != Dtype::Real {
            return Err(Error::Dtype("mask must be real".into()));
        }
        if mask.shape != self.shape {
            return Err(Error::Shape(format!(
                "mask {:?} vs tensor {:?}",
                mask.shape, self.shape
            )));
        }
        let w = self.dtype.width();
        let mut data = self.data.clone();
        for (i, chunk) in data.chunks_exact_mut(w).enumerate() {
            for v in chunk {
                *v *= mask.data[i];
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data,
        })
    }

    pub fn iter_complex(&self) -> Result<impl Iterator<Item = Complex<T>> + '_> {
        if self.dtype != Dtype::Complex {
            return Err(Error::Dtype("expected a complex tensor".into()));
        }
        Ok(self.data.chunks_exact(2).map(|p| Complex::new(p[0], p[1])))
    }
}

/// Largest absolute elementwise difference between two same-layout tensors.
pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.check_same_layout(b, "max_abs_diff")?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y).abs())
        .fold(T::zero(), T::max))
}
