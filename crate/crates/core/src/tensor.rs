//! Dense row-major f64 tensors.
//!
//! All numeric state in the graph lives in these. No views, no strides:
//! every tensor owns its buffer, which keeps evaluation order and therefore
//! results deterministic.

use crate::error::{Error, Result};

/// A dense row-major array of f64 with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `(m, k, n)` dimensions of `op(a) @ op(b)` after applying transpose flags.
pub fn matmul_dims(
    a_shape: &[usize],
    b_shape: &[usize],
    trans_a: bool,
    trans_b: bool,
) -> Result<(usize, usize, usize)> {
    if a_shape.len() != 2 || b_shape.len() != 2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("expected rank-2 operands, got {:?} and {:?}", a_shape, b_shape),
        });
    }
    let (m, ka) = if trans_a { (a_shape[1], a_shape[0]) } else { (a_shape[0], a_shape[1]) };
    let (kb, n) = if trans_b { (b_shape[1], b_shape[0]) } else { (b_shape[0], b_shape[1]) };
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!(
                "inner dimensions differ: {:?}{} x {:?}{}",
                a_shape,
                if trans_a { "^T" } else { "" },
                b_shape,
                if trans_b { "^T" } else { "" },
            ),
        });
    }
    Ok((m, ka, n))
}

/// `op(a) @ op(b)` with optional transposes, plain triple loop.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape(), trans_a, trans_b)?;
    let ad = a.data();
    let bd = b.data();
    let (a_rows, a_cols) = (a.shape[0], a.shape[1]);
    let (b_rows, b_cols) = (b.shape[0], b.shape[1]);
    let _ = (a_rows, b_rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = if trans_a { ad[kk * a_cols + i] } else { ad[i * a_cols + kk] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if trans_b {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * b_cols + kk];
                }
            } else {
                let brow = &bd[kk * b_cols..kk * b_cols + n];
                for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}
