use ndarray::{Array2, ArrayView2, Zip};

use super::{Evaluated, LabelMatrix, LossError, LossValue, Result};

/// Mean binary cross-entropy over all `N x L` logit entries.
///
/// Uses `max(x, 0) - x y + ln(1 + e^{-|x|})`, which never overflows.
pub fn bce_multilabel(logits: ArrayView2<f64>, labels: &LabelMatrix) -> Result<Evaluated<Array2<f64>>> {
    if logits.dim() != labels.view().dim() {
        return Err(LossError::Configuration(format!(
            "logits shape {:?} does not match labels shape {:?}",
            logits.dim(),
            labels.view().dim()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(LossError::Precondition("logits must be finite".into()));
    }
    let count = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    Zip::from(&mut grad)
        .and(logits)
        .and(labels.view())
        .for_each(|g, &x, &y| {
            let y = f64::from(y);
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            *g = (sigmoid(x) - y) / count;
        });
    Ok(Evaluated {
        value: LossValue::single("bce", total / count),
        grad,
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
