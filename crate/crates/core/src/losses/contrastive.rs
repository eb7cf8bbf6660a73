use ndarray::{Array1, Array2, ArrayView2};

use super::{Evaluated, LabelMatrix, LossError, LossValue, ProjectionMatrix, Result, Temperature};

/// Breakdown key set (with value 0) when no anchor in a batch has a positive.
pub const NO_POSITIVES_FLAG: &str = "mulsupcon.warning_no_positive_anchors";

/// Gradients of a two-input loss.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub s1: Array2<f64>,
    pub s2: Array2<f64>,
}

/// Softmax cross-entropy over rows of a logit matrix.
///
/// For anchor row `i` with target weights `w_i` (summing to `s_i`, either 0
/// or 1) and an allowed denominator set `D_i`:
/// `loss_i = sum_b w_ib * (lse_{a in D_i} l_ia - l_ib)`.
/// Returns the per-row losses and `d loss_i / d l_i.` stacked as a matrix.
/// Rows with zero target mass yield zero loss and zero gradient.
struct RowSoftmaxCe {
    losses: Array1<f64>,
    grad: Array2<f64>,
}

fn row_softmax_ce(
    logits: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    allowed: impl Fn(usize, usize) -> bool,
) -> RowSoftmaxCe {
    let (rows, cols) = logits.dim();
    let mut losses = Array1::zeros(rows);
    let mut grad = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mass: f64 = targets.row(i).sum();
        if mass == 0.0 {
            continue;
        }
        let max = (0..cols)
            .filter(|&b| allowed(i, b))
            .map(|b| logits[[i, b]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for b in (0..cols).filter(|&b| allowed(i, b)) {
            let e = (logits[[i, b]] - max).exp();
            grad[[i, b]] = e;
            denom += e;
        }
        let lse = max + denom.ln();
        let mut loss = 0.0;
        for b in 0..cols {
            let w = targets[[i, b]];
            if w != 0.0 {
                loss += w * (lse - logits[[i, b]]);
            }
            grad[[i, b]] = mass * grad[[i, b]] / denom - w;
        }
        losses[i] = loss;
    }
    RowSoftmaxCe { losses, grad }
}

fn check_pairs(rows: usize, what: &str) -> Result<()> {
    if rows < 2 {
        return Err(LossError::InvalidBatch(format!(
            "{what} needs at least 2 samples, got {rows}"
        )));
    }
    Ok(())
}

/// NT-Xent over `2N` stacked views: row `i` and row `i + N` are a positive
/// pair, every other row is a negative.
///
/// The loss is the mean over all `2N` anchors.
pub fn ntxent_intra(views: &ProjectionMatrix, temperature: Temperature) -> Result<Evaluated<Array2<f64>>> {
    let total = views.nrows();
    if total % 2 != 0 {
        return Err(LossError::InvalidBatch(format!(
            "NT-Xent expects an even number of stacked views, got {total}"
        )));
    }
    let n = total / 2;
    check_pairs(n, "NT-Xent")?;
    let tau = temperature.value();
    let z = views.view();
    let logits = z.dot(&z.t()) / tau;
    let mut targets = Array2::zeros((total, total));
    for i in 0..total {
        targets[[i, (i + n) % total]] = 1.0;
    }
    let ce = row_softmax_ce(logits.view(), targets.view(), |i, b| i != b);
    let value = ce.losses.sum() / total as f64;
    let g = ce.grad / total as f64;
    let grad = (&g + &g.t()).dot(&z) / tau;
    Ok(Evaluated {
        value: LossValue::single("ntxent", value),
        grad,
    })
}

/// Symmetric cross-modal InfoNCE. Row `i` of `s1` and row `i` of `s2` are
/// co-registered positives; negatives are the other rows of the opposite
/// modality only.
pub fn infonce_inter(
    s1: &ProjectionMatrix,
    s2: &ProjectionMatrix,
    temperature: Temperature,
) -> Result<Evaluated<PairGrad>> {
    if s1.ncols() != s2.ncols() {
        return Err(LossError::Configuration(format!(
            "inter-modal contrast needs equal latent widths, got {} and {}",
            s1.ncols(),
            s2.ncols()
        )));
    }
    if s1.nrows() != s2.nrows() {
        return Err(LossError::Configuration(format!(
            "inter-modal contrast needs equal row counts, got {} and {}",
            s1.nrows(),
            s2.nrows()
        )));
    }
    let n = s1.nrows();
    check_pairs(n, "inter-modal InfoNCE")?;
    let tau = temperature.value();
    let (a, b) = (s1.view(), s2.view());
    let logits = a.dot(&b.t()) / tau;
    let eye = Array2::<f64>::eye(n);
    let forward = row_softmax_ce(logits.view(), eye.view(), |_, _| true);
    let backward = row_softmax_ce(logits.t(), eye.view(), |_, _| true);
    let value = 0.5 * (forward.losses.sum() + backward.losses.sum()) / n as f64;
    let dlogits = (&forward.grad + &backward.grad.t()) * (0.5 / n as f64);
    let grad = PairGrad {
        s1: dlogits.dot(&b) / tau,
        s2: dlogits.t().dot(&a) / tau,
    };
    Ok(Evaluated {
        value: LossValue::single("infonce", value),
        grad,
    })
}

/// Multi-label supervised contrastive loss (per-label positive sets).
///
/// For anchor `i` and each active label `c`, the positives are the other
/// samples with `c` active. Each label's positives are averaged, then the
/// labels with a non-empty positive set are averaged, then the anchors with
/// at least one such label are averaged. The denominator of every term runs
/// over all samples except the anchor.
///
/// A batch where no anchor has a positive returns zero and records
/// [`NO_POSITIVES_FLAG`] in the breakdown.
pub fn mulsupcon(
    z: &ProjectionMatrix,
    labels: &LabelMatrix,
    temperature: Temperature,
) -> Result<Evaluated<Array2<f64>>> {
    let n = z.nrows();
    if labels.nrows() != n {
        return Err(LossError::Configuration(format!(
            "{} embeddings but {} label rows",
            n,
            labels.nrows()
        )));
    }
    check_pairs(n, "MulSupCon")?;
    let y = labels.view();
    let (targets, anchors) = label_targets(y);
    if anchors == 0 {
        let mut value = LossValue::single("mulsupcon", 0.0);
        value.terms.insert(NO_POSITIVES_FLAG.into(), 0.0);
        return Ok(Evaluated {
            value,
            grad: Array2::zeros(z.view().raw_dim()),
        });
    }
    let tau = temperature.value();
    let zv = z.view();
    let logits = zv.dot(&zv.t()) / tau;
    let ce = row_softmax_ce(logits.view(), targets.view(), |i, b| i != b);
    let value = ce.losses.sum() / anchors as f64;
    let g = ce.grad / anchors as f64;
    let grad = (&g + &g.t()).dot(&zv) / tau;
    Ok(Evaluated {
        value: LossValue::single("mulsupcon", value),
        grad,
    })
}

/// Per-anchor positive weights; each contributing row sums to one.
fn label_targets(y: ArrayView2<u8>) -> (Array2<f64>, usize) {
    let (n, l) = y.dim();
    let counts: Vec<usize> = (0..l)
        .map(|c| y.column(c).iter().filter(|v| **v == 1).count())
        .collect();
    let mut targets = Array2::zeros((n, n));
    let mut anchors = 0;
    for i in 0..n {
        // Labels of anchor i that some other sample also carries.
        let shared: Vec<usize> = (0..l)
            .filter(|&c| y[[i, c]] == 1 && counts[c] > 1)
            .collect();
        if shared.is_empty() {
            continue;
        }
        anchors += 1;
        let label_weight = 1.0 / shared.len() as f64;
        for &c in &shared {
            let per_positive = label_weight / (counts[c] - 1) as f64;
            for j in (0..n).filter(|&j| j != i && y[[j, c]] == 1) {
                targets[[i, j]] += per_positive;
            }
        }
    }
    (targets, anchors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(rows: Array2<f64>) -> ProjectionMatrix {
        ProjectionMatrix::new(rows).unwrap()
    }

    #[test]
    fn ntxent_identical_rows_is_log3() {
        let z = unit(Array2::from_elem((4, 3), 1.0 / 3f64.sqrt()));
        for tau in [0.1, 0.5, 1.0, 7.0] {
            let v = ntxent_intra(&z, Temperature::new(tau).unwrap()).unwrap().value.total;
            assert!((v - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ntxent_orthogonal_pairs() {
        let z = unit(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let v = ntxent_intra(&z, Temperature::new(1.0).unwrap()).unwrap().value.total;
        let e = 1f64.exp();
        assert!((v + (e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn ntxent_rejects_single_pair_and_odd_rows() {
        let z = unit(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(ntxent_intra(&z, Temperature::DEFAULT), Err(LossError::InvalidBatch(_))));
        let z = unit(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert!(matches!(ntxent_intra(&z, Temperature::DEFAULT), Err(LossError::InvalidBatch(_))));
    }

    #[test]
    fn infonce_closed_forms() {
        let same = unit(Array2::from_elem((2, 2), 1.0 / 2f64.sqrt()));
        let v = infonce_inter(&same, &same, Temperature::DEFAULT).unwrap().value.total;
        assert!((v - 2f64.ln()).abs() < 1e-12);

        let z = unit(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = infonce_inter(&z, &z, Temperature::new(1.0).unwrap()).unwrap().value.total;
        let e = 1f64.exp();
        assert!((v + (e / (e + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_width_mismatch() {
        let a = unit(array![[1.0, 0.0], [0.0, 1.0]]);
        let b = unit(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(
            infonce_inter(&a, &b, Temperature::DEFAULT),
            Err(LossError::Configuration(_))
        ));
    }

    #[test]
    fn mulsupcon_two_identical_sharing_one_label_is_zero() {
        let z = unit(array![[0.6, 0.8], [0.6, 0.8]]);
        let y = LabelMatrix::new(array![[1, 0], [1, 0]]).unwrap();
        let v = mulsupcon(&z, &y, Temperature::DEFAULT).unwrap().value.total;
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn mulsupcon_degenerate_batch_flags_warning() {
        let z = unit(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let y = LabelMatrix::new(array![[1, 0, 0], [0, 1, 0], [0, 0, 0]]).unwrap();
        let out = mulsupcon(&z, &y, Temperature::DEFAULT).unwrap();
        assert_eq!(out.value.total, 0.0);
        assert!(out.value.terms.contains_key(NO_POSITIVES_FLAG));
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn label_weights_sum_to_one_for_contributing_anchors() {
        let y = array![[1u8, 1, 0], [1, 0, 0], [0, 1, 1], [0, 0, 1], [0, 0, 0]];
        let (t, anchors) = label_targets(y.view());
        assert_eq!(anchors, 4);
        for i in 0..4 {
            assert!((t.row(i).sum() - 1.0).abs() < 1e-15);
        }
        assert_eq!(t.row(4).sum(), 0.0);
        // anchor 0: label 0 -> {1}, label 1 -> {2}; each label weight 1/2
        assert_eq!(t[[0, 1]], 0.5);
        assert_eq!(t[[0, 2]], 0.5);
    }
}
