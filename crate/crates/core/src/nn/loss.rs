use super::tensor::{Scalar, Tensor};

/// Row-wise softmax of `[N, K]` logits, computed with the max subtracted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (_, k) = logits.dims2();
    let mut out = logits.clone();
    for row in out.data.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    out
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let (n, k) = logits.dims2();
    assert_eq!(n, labels.len(), "one label per row");
    let mut grad = softmax(logits);
    let mut loss = 0.0f64;
    let scale = T::from_f64(1.0 / n as f64);
    for ((row, logit_row), &y) in grad.data.chunks_mut(k).zip(logits.data.chunks(k)).zip(labels) {
        assert!(y < k, "label {y} out of range");
        let max = logit_row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logit_row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - logit_row[y].as_f64();
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    (T::from_f64(loss / n as f64), grad)
}
