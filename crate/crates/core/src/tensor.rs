//! Dense row-major `f64` tensors and their binary encoding.

use std::fmt;
use std::io::{Read, Write};

use crate::alloc;
use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn track(shape: Vec<usize>, data: Vec<f64>) -> Self {
        alloc::record_alloc(data.len() * std::mem::size_of::<f64>());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::track(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::track(shape.to_vec(), vec![value; n])
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Self::track(shape.to_vec(), data))
    }

    pub fn scalar(value: f64) -> Self {
        Self::track(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        alloc::record_free(self.data.len() * std::mem::size_of::<f64>());
        std::mem::take(&mut self.data)
    }

    /// Rows of a rank-2 tensor (1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::track(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Copies rows `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.rows() {
            return Err(Error::Bounds {
                index: start + len,
                extent: self.rows(),
            });
        }
        let c = self.cols();
        Tensor::from_vec(&[len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::track(vec![c, r], out)
    }

    /// Plain matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            &self.data,
            Layout::Normal,
            &other.data,
            Layout::Normal,
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("expected tensor magic, found {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::from_vec(&shape, data)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::track(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        alloc::record_free(self.data.len() * std::mem::size_of::<f64>());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub rs: isize,
    pub cs: isize,
}

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Strides { rs: cols as isize, cs: 1 }
    }

    pub fn col_major(rows: usize) -> Self {
        Strides { rs: 1, cs: rows as isize }
    }
}

/// `c = a·b + beta·c` over arbitrary strided views. `a`, `b` and `c` are
/// pointers to the first element of each view.
///
/// # Safety
/// Every index reachable through the given extents and strides must lie
/// inside the allocation behind the corresponding pointer, and `c` must not
/// alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) unsafe fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    sa: Strides,
    b: *const f64,
    sb: Strides,
    beta: f64,
    c: *mut f64,
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    matrixmultiply::dgemm(m, k, n, 1.0, a, sa.rs, sa.cs, b, sb.rs, sb.cs, beta, c, sc.rs, sc.cs);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `c = a·b + beta·c` where `a` is logically m×k and `b` is k×n. A
/// transposed operand is stored with its logical transpose in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the slices cover exactly the strided ranges described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_product() {
        let a = Tensor::eye(2);
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_gemm_layouts() {
        let a = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let want = a.matmul(&b).unwrap();
        let at = a.transpose();
        let bt = b.transpose();
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, at.data(), Layout::Transposed, bt.data(), Layout::Transposed, &mut c, 0.0);
        assert_eq!(c, want.data());
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"XXXX\0\0\0\0".to_vec();
        assert!(matches!(Tensor::read_from(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn encoding_round_trips(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0)
                .collect();
            let t = Tensor::from_vec(&[rows, cols], data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 4 + 4 + 16 + rows * cols * 8);
            let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
