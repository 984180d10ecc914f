//! Dense row-major tensor of 64-bit reals.

use rand_chacha::ChaCha8Rng;

use crate::rng;

/// Dense multi-dimensional array, row-major, `f64` storage.
///
/// Tensors are plain values: once constructed they are never mutated by the
/// graph machinery, so sharing them across threads is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} expects {} values, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform draws in [lo, hi), consumed from `rng` in row-major order.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng::next_uniform(rng, lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    /// Entry accessor for 2-d tensors.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Entry accessor for 3-d tensors.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    /// Exact bit-level equality (distinguishes -0.0/0.0 and NaN payloads).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Relative error with unit floor: |a-b| / max(1, |a|, |b|).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Same-length 1-d convolution (cross-correlation orientation, zero padding,
/// stride 1). `kernel.len()` must be odd.
///
/// out[i] = sum_k signal[i + k - (L-1)/2] * kernel[k], zero outside bounds.
pub fn conv1d_same(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    assert!(
        kernel.len() % 2 == 1,
        "kernel length must be odd (validated at configuration)"
    );
    let d = signal.len();
    let off = (kernel.len() - 1) / 2;
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            let pos = i + k;
            if pos >= off && pos - off < d {
                acc += signal[pos - off] * w;
            }
        }
        *o = acc;
    }
    out
}

/// Row-wise softmax of an R x K matrix with per-row max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    assert_eq!(m.rank(), 2, "softmax_rows expects a matrix");
    let cols = m.shape()[1];
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_row_inplace(row);
    }
    Tensor::new(m.shape().to_vec(), out)
}

/// Stable softmax of one row, in place.
pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn conv_delta_kernel_is_identity() {
        let out = conv1d_same(&[5.0, 7.0, 9.0], &[0.0, 1.0, 0.0]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_box_kernel_matches_hand_computation() {
        let out = conv1d_same(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        assert_eq!(out, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_zero_signal_stays_zero() {
        let out = conv1d_same(&[0.0; 8], &[0.3, -1.0, 2.0, 0.5, 0.1]);
        assert_eq!(out, vec![0.0; 8]);
    }

    // Independent oracle: explicitly padded signal, naive triple loop.
    fn conv_oracle(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
        let d = signal.len();
        let lf = kernel.len();
        let off = (lf - 1) / 2;
        let mut padded = vec![0.0; d + 2 * off];
        padded[off..off + d].copy_from_slice(signal);
        (0..d)
            .map(|i| (0..lf).map(|k| padded[i + k] * kernel[k]).sum())
            .collect()
    }

    #[test]
    fn conv_matches_naive_padding_oracle_on_random_cases() {
        let mut rng = stream(42, "conv-oracle");
        for _ in 0..1000 {
            let d = 1 + crate::rng::next_index(&mut rng, 32);
            let max_lf = 2 * d - 1;
            let lf = loop {
                let l = 1 + crate::rng::next_index(&mut rng, max_lf);
                if l % 2 == 1 {
                    break l;
                }
            };
            let signal: Vec<f64> = (0..d)
                .map(|_| crate::rng::next_uniform(&mut rng, -2.0, 2.0))
                .collect();
            let kernel: Vec<f64> = (0..lf)
                .map(|_| crate::rng::next_uniform(&mut rng, -2.0, 2.0))
                .collect();
            let got = conv1d_same(&signal, &kernel);
            let want = conv_oracle(&signal, &kernel);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12, "d={} lf={}: {} vs {}", d, lf, g, w);
            }
        }
    }

    #[test]
    fn softmax_symmetric_rows() {
        let m = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        assert_eq!(softmax_rows(&m).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let m = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let s = softmax_rows(&m);
        let e = 1.0_f64.exp();
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[0] - 0.7311).abs() < 5e-5);
        assert!((s.data()[1] - 0.2689).abs() < 5e-5);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let m = Tensor::new(vec![1, 2], vec![1000.0, 1000.0]);
        assert_eq!(softmax_rows(&m).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = stream(9, "softmax-prop");
        for _ in 0..500 {
            let cols = 1 + crate::rng::next_index(&mut rng, 12);
            // Integer-valued entries and an exactly representable shift keep
            // x + c exact, so shifted softmax must match bitwise.
            let data: Vec<f64> = (0..cols)
                .map(|_| crate::rng::next_index(&mut rng, 41) as f64 - 20.0)
                .collect();
            let m = Tensor::new(vec![1, cols], data.clone());
            let s = softmax_rows(&m);
            let sum: f64 = s.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(s.data().iter().all(|v| *v >= 0.0));

            let shift = 1024.0;
            let shifted = Tensor::new(vec![1, cols], data.iter().map(|v| v + shift).collect());
            assert!(softmax_rows(&shifted).bits_eq(&s));
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
