use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

use super::NumericsError;

/// Process-wide storage precision.
///
/// `F32` rounds every stored value to 32-bit precision (arithmetic is carried
/// out in 64-bit and the result of each operation is rounded), `F64` stores
/// full doubles. Gradient checks are only meaningful under `F64`; training
/// runs use `F32`. Set once at process start, before any tensor is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

static PRECISION: AtomicU8 = AtomicU8::new(1); // 0 = F32, 1 = F64

pub fn set_precision(p: Precision) {
    PRECISION.store(matches!(p, Precision::F64) as u8, Ordering::SeqCst);
}

pub fn precision() -> Precision {
    if PRECISION.load(Ordering::SeqCst) == 0 {
        Precision::F32
    } else {
        Precision::F64
    }
}

/// Rounds a buffer to the storage precision in place. Applied to every
/// operation output, and by the optimizer to its moment slots so that a
/// checkpoint's 32-bit payload loses nothing in 32-bit mode.
pub fn quantize_all(values: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Dense multi-dimensional array, row-major, immutable once produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness and rounding
    /// to the process precision.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::BadLength {
                op: "tensor",
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "tensor" });
        }
        quantize_all(&mut data);
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for values already produced by a checked op.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn scalar(v: f64) -> Result<Self, NumericsError> {
        Tensor::new(vec![1, 1], vec![v])
    }

    /// Row vector `1×n`.
    pub fn row_vector(data: Vec<f64>) -> Result<Self, NumericsError> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    /// Matrix `rows×cols` from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Extents of a matrix; errors when the tensor is not 2-D.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(NumericsError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row on rank-0 tensor");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Row-wise softmax, plain math outside any graph. Used to turn logits
    /// into probabilities at inference time.
    pub fn softmax_rows(&self) -> Tensor {
        let (rows, cols) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => panic!("softmax_rows expects a matrix, got {:?}", self.shape),
        };
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(
                &self.data[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        quantize_all(&mut out);
        Tensor::from_op(self.shape.clone(), out)
    }

    /// Index of the largest value in row `i`; ties resolve to the lowest index.
    pub fn argmax_row(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        best
    }
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
