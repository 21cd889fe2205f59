use std::fmt;
use std::sync::Arc;

use super::tape::NodeRef;

/// Dense matrix of 64-bit floats in row-major order.
///
/// Every tensor in the crate is two-dimensional: vectors are `1×n` rows and
/// scalars are `1×1`. The buffer is shared behind an [`Arc`], so clones and
/// detached views are cheap and a tensor with no tape attachment is immutable
/// and safe to share across threads.
#[derive(Clone)]
pub struct Tensor {
    shape: [usize; 2],
    data: Arc<Vec<f64>>,
    pub(super) node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "buffer length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor {
            shape: [rows, cols],
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::from_vec(rows, cols, vec![value; rows * cols])
    }

    /// A `1×1` tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value])
    }

    /// A `1×n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_vec(1, n, values)
    }

    pub(super) fn attached(rows: usize, cols: usize, data: Arc<Vec<f64>>, node: NodeRef) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor {
            shape: [rows, cols],
            data,
            node: Some(node),
        }
    }

    pub(super) fn from_arc(shape: [usize; 2], data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape[0] * shape[1], data.len());
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(super) fn buffer(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows() && c < self.cols(), "index out of bounds");
        self.data[r * self.cols() + c]
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a 1x1 tensor");
        self.data[0]
    }

    /// Whether gradients will be tracked through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(super) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same buffer, no tape attachment. Gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Index of the largest value in each row (ties resolve to the first).
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.cols();
        (0..self.rows())
            .map(|r| {
                let row = &self.data[r * cols..(r + 1) * cols];
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Exact bit equality of shape and buffer contents.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field(
                "data",
                &if self.numel() <= 8 {
                    format!("{:?}", &self.data[..])
                } else {
                    format!("[{} values]", self.numel())
                },
            )
            .finish()
    }
}
