//! Dense row-major matrices and vectors with the handful of operations the
//! model needs. Precision is a run-wide choice: everything is generic over
//! [`Scalar`], instantiated at `f32` for training and `f64` for gradient
//! checking.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float + num_traits::NumAssign + Sum<Self> + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// IEEE-754 width in bits, recorded in checkpoint headers.
    const BITS: u32;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix_from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Test helper: build from nested f64 rows.
    pub fn from_rows_f64(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| F::from_f64(x)));
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * v`.
    pub fn matvec(&self, v: &Vector<F>) -> Result<Vector<F>> {
        if self.cols != v.len() {
            return Err(Error::shape("matvec", self.shape(), format!("len {}", v.len())));
        }
        let mut out = vec![F::zero(); self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = F::zero();
            for (a, b) in row.iter().zip(v.data().iter()) {
                acc = acc + *a * *b;
            }
            *o = acc;
        }
        Ok(Vector { data: out })
    }

    /// `self^T * v` without materializing the transpose.
    pub fn matvec_t(&self, v: &Vector<F>) -> Result<Vector<F>> {
        if self.rows != v.len() {
            return Err(Error::shape(
                "matvec_t",
                self.shape(),
                format!("len {}", v.len()),
            ));
        }
        let mut out = vec![F::zero(); self.cols];
        for (r, &s) in v.data().iter().enumerate() {
            if s == F::zero() {
                continue;
            }
            let row = self.row(r);
            for (o, &a) in out.iter_mut().zip(row.iter()) {
                *o += s * a;
            }
        }
        Ok(Vector { data: out })
    }

    /// `self += u * v^T`, the outer-product accumulation used by every
    /// weight-gradient update.
    pub fn add_outer(&mut self, u: &Vector<F>, v: &Vector<F>) -> Result<()> {
        if self.rows != u.len() || self.cols != v.len() {
            return Err(Error::shape(
                "add_outer",
                self.shape(),
                format!("{}x{}", u.len(), v.len()),
            ));
        }
        for (r, &s) in u.data().iter().enumerate() {
            if s == F::zero() {
                continue;
            }
            let row = self.row_mut(r);
            for (o, &b) in row.iter_mut().zip(v.data().iter()) {
                *o += s * b;
            }
        }
        Ok(())
    }
}

/// Dense vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector<F> {
    data: Vec<F>,
}

impl<F: Scalar> Vector<F> {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![F::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Vector { data }
    }

    pub fn from_f64_slice(xs: &[f64]) -> Self {
        Vector {
            data: xs.iter().map(|&x| F::from_f64(x)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> F {
        self.data[i]
    }

    pub fn dot(&self, other: &Vector<F>) -> Result<F> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "dot",
                format!("len {}", self.len()),
                format!("len {}", other.len()),
            ));
        }
        let mut acc = F::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc = acc + *a * *b;
        }
        Ok(acc)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Vector<F>, s: F) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "add_scaled",
                format!("len {}", self.len()),
                format!("len {}", other.len()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn argmax(&self) -> Option<usize> {
        // Ties resolve to the lowest index.
        let mut best: Option<(usize, F)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Matrix-vector product; errors name both shapes on mismatch.
pub fn matvec<F: Scalar>(m: &Matrix<F>, v: &Vector<F>) -> Result<Vector<F>> {
    m.matvec(v)
}

/// Numerically safe softmax (max subtraction before exponentiation).
pub fn softmax<F: Scalar>(v: &Vector<F>) -> Result<Vector<F>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let max = v
        .data()
        .iter()
        .cloned()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut out: Vec<F> = v.data().iter().map(|&x| (x - max).exp()).collect();
    let sum: F = out.iter().cloned().sum();
    for x in out.iter_mut() {
        *x = *x / sum;
    }
    Ok(Vector::from_vec(out))
}

/// `ln softmax(v)`, computed without forming the softmax itself.
pub fn log_softmax<F: Scalar>(v: &Vector<F>) -> Result<Vector<F>> {
    if v.is_empty() {
        return Err(Error::Empty("log_softmax"));
    }
    let max = v
        .data()
        .iter()
        .cloned()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let sum: F = v.data().iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    Ok(Vector::from_vec(
        v.data().iter().map(|&x| x - log_z).collect(),
    ))
}

pub fn sigmoid<F: Scalar>(v: &Vector<F>) -> Vector<F> {
    Vector::from_vec(
        v.data()
            .iter()
            .map(|&x| F::one() / (F::one() + (-x).exp()))
            .collect(),
    )
}

pub fn tanh<F: Scalar>(v: &Vector<F>) -> Vector<F> {
    Vector::from_vec(v.data().iter().map(|&x| x.tanh()).collect())
}

/// Elementwise product (the LSTM equations' circle operator).
pub fn hadamard<F: Scalar>(a: &Vector<F>, b: &Vector<F>) -> Result<Vector<F>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "hadamard",
            format!("len {}", a.len()),
            format!("len {}", b.len()),
        ));
    }
    Ok(Vector::from_vec(
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x * y)
            .collect(),
    ))
}

pub fn add<F: Scalar>(a: &Vector<F>, b: &Vector<F>) -> Result<Vector<F>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "add",
            format!("len {}", a.len()),
            format!("len {}", b.len()),
        ));
    }
    Ok(Vector::from_vec(
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x + y)
            .collect(),
    ))
}

/// Concatenation, the `||` operator of the encoder equations.
pub fn concat<F: Scalar>(a: &Vector<F>, b: &Vector<F>) -> Vector<F> {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Vector::from_vec(data)
}
