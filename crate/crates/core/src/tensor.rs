//! Dense numeric kernel.
//!
//! A [`Tensor`] is a rank 1..=3 array of `f64` stored row-major with explicit
//! shape metadata. Only the handful of primitives the network needs live here:
//! matrix-vector products with their gradient transforms, concatenation and its
//! inverse split, a central finite-difference oracle, and the little-endian
//! block format used by checkpoints and binary feature files.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor data length", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("ragged rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading extent: rows of a matrix, length of a vector.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all extents after the first (1 for vectors).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("axpy", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the tensor as a little-endian block: rank (u32), extents (u32
    /// each), then the data as IEEE-754 binary64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            let e = u32::try_from(e).map_err(|_| Error::arg("tensor extent exceeds u32"))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::arg(format!("tensor block has invalid rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::arg(format!(
            "tensor rank must be 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::arg(format!("tensor extents must be positive, got {shape:?}")));
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

// Slice kernels shared by the layers. Callers guarantee the lengths.

/// `out = W x` with `W` row-major `[out.len() x x.len()]`.
pub(crate) fn gemv(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = dot(row, x);
    }
}

/// `dx += W^T g`.
pub(crate) fn gemv_t_acc(w: &[f64], g: &[f64], dx: &mut [f64]) {
    let n = dx.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(n)) {
        if *gi == 0.0 {
            continue;
        }
        for (d, wv) in dx.iter_mut().zip(row) {
            *d += gi * wv;
        }
    }
}

/// `dW += g x^T`.
pub(crate) fn outer_acc(g: &[f64], x: &[f64], dw: &mut [f64]) {
    let n = x.len();
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(n)) {
        if *gi == 0.0 {
            continue;
        }
        for (d, xv) in row.iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

fn check_matvec(w: &Tensor, x: &Tensor) -> Result<()> {
    if w.rank() != 2 || x.rank() != 1 || w.shape[1] != x.shape[0] {
        return Err(Error::dim("matvec", &w.shape, &x.shape));
    }
    Ok(())
}

/// Matrix-vector product `W x`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    check_matvec(w, x)?;
    let mut out = vec![0.0; w.shape[0]];
    gemv(&w.data, &x.data, &mut out);
    Ok(Tensor::vector(out))
}

/// Gradients of `<upstream, W x>` with respect to `W` and `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatvecGrad {
    pub weights: Tensor,
    pub input: Tensor,
}

pub fn matvec_backward(w: &Tensor, x: &Tensor, upstream: &Tensor) -> Result<MatvecGrad> {
    check_matvec(w, x)?;
    if upstream.shape != [w.shape[0]] {
        return Err(Error::dim("matvec upstream", &upstream.shape, &w.shape[..1]));
    }
    let mut dw = Tensor::zeros(&w.shape);
    let mut dx = Tensor::zeros(&x.shape);
    outer_acc(&upstream.data, &x.data, &mut dw.data);
    gemv_t_acc(&w.data, &upstream.data, &mut dx.data);
    Ok(MatvecGrad {
        weights: dw,
        input: dx,
    })
}

/// Concatenates vectors end to end.
pub fn concat(segments: &[&Tensor]) -> Result<Tensor> {
    if segments.is_empty() {
        return Err(Error::arg("concat of an empty segment list"));
    }
    let mut data = Vec::with_capacity(segments.iter().map(|s| s.len()).sum());
    for s in segments {
        if s.rank() != 1 {
            return Err(Error::dim("concat expects vectors", &s.shape, &[s.len()]));
        }
        data.extend_from_slice(&s.data);
    }
    Ok(Tensor::vector(data))
}

/// Gradient transform of [`concat`]: cuts an upstream gradient back into
/// per-segment pieces of the given lengths.
pub fn split(upstream: &Tensor, lengths: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = lengths.iter().sum();
    if upstream.rank() != 1 || upstream.len() != total {
        return Err(Error::dim("split", &upstream.shape, &[total]));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::arg("split lengths must be non-empty and positive"));
    }
    let mut out = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for &n in lengths {
        out.push(Tensor::vector(upstream.data[at..at + n].to_vec()));
        at += n;
    }
    Ok(out)
}

/// Central finite-difference gradient of `f` at `x`.
///
/// `f` is called twice per coordinate on a scratch copy of `x`; a non-finite
/// value aborts with the offending coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    finite_difference_gradient_at(&mut f, x, h, 0..x.len())
}

/// Same as [`finite_difference_gradient`] restricted to a set of coordinates;
/// the result has one entry per requested coordinate, in order.
pub fn finite_difference_gradient_at<F, I>(f: &mut F, x: &[f64], h: f64, coords: I) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
    I: IntoIterator<Item = usize>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::new();
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
