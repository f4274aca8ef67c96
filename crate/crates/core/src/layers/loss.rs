use alloc::vec;

use crate::error::{data_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = logits.dims2()?;
    let mut p = vec![T::zero(); n * c];
    for b in 0..n {
        let row = &logits.data()[b * c..(b + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let out = &mut p[b * c..(b + 1) * c];
        let mut z = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            z = z + *o;
        }
        for o in out.iter_mut() {
            *o = *o / z;
        }
    }
    Tensor::from_vec(&[n, c], p)
}

/// Mean over the batch of `-log softmax(logits)[label]`, and its gradient
/// `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(data_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(data_err!("label {l} at batch index {i} is outside 0..{c}"));
    }
    let inv_n = T::one() / T::from_f64_lossy(n as f64);
    let mut grad = vec![T::zero(); n * c];
    let mut total = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * c..(b + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let z = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let log_z = z.ln() + max;
        total = total + (log_z - row[label]);
        let g = &mut grad[b * c..(b + 1) * c];
        for (j, (gj, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            *gj = (p - onehot) * inv_n;
        }
    }
    Ok((total * inv_n, Tensor::from_vec(&[n, c], grad)?))
}
