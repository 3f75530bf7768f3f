use serde::{Deserialize, Serialize};

/// Dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Number of rows when viewed as a matrix whose last axis is the row.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor { shape, data }
    }

    /// Row-wise argmax of a 2-D tensor; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Numerically stable row-wise softmax of a `[rows, cols]` buffer.
pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

pub fn softmax(t: &Tensor) -> Tensor {
    Tensor::new(t.shape.clone(), softmax_rows(&t.data, t.cols()))
}

pub fn log_softmax(t: &Tensor) -> Tensor {
    Tensor::new(t.shape.clone(), log_softmax_rows(&t.data, t.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]);
        let p = softmax(&t);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p.all_finite());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.1]);
        assert_eq!(t.argmax_rows(), vec![0]);
    }
}
