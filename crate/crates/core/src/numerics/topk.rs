use std::cmp::Ordering;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Indices of the `k` largest values, ordered by value descending then index ascending.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie.
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        (values[b] + 0.0).total_cmp(&(values[a] + 0.0)).then(a.cmp(&b))
    };
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.truncate(k);
    idx
}

/// Keeps the `k` largest entries of `v` and zeroes the others.
pub fn topk_mask(v: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || k > v.numel() {
        return Err(Error::InvalidArgument(format!(
            "topk: k = {k} outside 1..={}",
            v.numel()
        )));
    }
    let mut out = vec![0.0; v.numel()];
    for i in topk_indices(v.data(), k) {
        out[i] = v.data()[i];
    }
    Tensor::new(v.shape(), out)
}
