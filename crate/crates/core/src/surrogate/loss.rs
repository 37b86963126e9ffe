use ndarray::{Array2, ArrayView2};

use crate::domain::Spectrum;
use crate::error::{check_len, Result};

use super::spec::LossKind;

/// Transition point of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

fn elementwise(e: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Mse => e * e,
        LossKind::SmoothL1 => {
            if e.abs() < SMOOTH_L1_BETA {
                0.5 * e * e / SMOOTH_L1_BETA
            } else {
                e.abs() - 0.5 * SMOOTH_L1_BETA
            }
        }
    }
}

fn elementwise_grad(e: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Mse => 2.0 * e,
        LossKind::SmoothL1 => {
            if e.abs() < SMOOTH_L1_BETA {
                e / SMOOTH_L1_BETA
            } else {
                e.signum()
            }
        }
    }
}

/// Mean elementwise loss between two spectra.
pub fn loss(pred: &Spectrum, truth: &Spectrum, kind: LossKind) -> Result<f64> {
    check_len("loss operands", truth.len(), pred.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| elementwise(p - t, kind))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Batch loss averaged over every element, with its gradient with respect
/// to `pred`.
pub(crate) fn batch_loss_and_grad(
    pred: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    kind: LossKind,
) -> (f64, Array2<f64>) {
    let n = (pred.len()).max(1) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&pred)
        .and(&truth)
        .for_each(|g, &p, &t| {
            let e = p - t;
            total += elementwise(e, kind);
            *g = elementwise_grad(e, kind) / n;
        });
    (total / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: Vec<f64>) -> Spectrum {
        Spectrum::new(v)
    }

    #[test]
    fn zero_when_equal() {
        let a = s(vec![0.1, 0.7, 0.3]);
        assert_eq!(loss(&a, &a, LossKind::Mse).unwrap(), 0.0);
        assert_eq!(loss(&a, &a, LossKind::SmoothL1).unwrap(), 0.0);
    }

    #[test]
    fn smooth_l1_branches() {
        let truth = s(vec![0.0; 4]);
        assert_eq!(loss(&s(vec![0.5; 4]), &truth, LossKind::SmoothL1).unwrap(), 0.125);
        assert_eq!(loss(&s(vec![2.0; 4]), &truth, LossKind::SmoothL1).unwrap(), 1.5);
        assert_eq!(loss(&s(vec![-2.0; 4]), &truth, LossKind::SmoothL1).unwrap(), 1.5);
    }

    #[test]
    fn length_mismatch() {
        assert!(loss(&s(vec![0.0; 3]), &s(vec![0.0; 4]), LossKind::Mse).is_err());
    }

    proptest! {
        #[test]
        fn smooth_l1_bounded_by_half_mse_plus_half_beta(e in prop::collection::vec(-20.0f64..20.0, 1..64)) {
            let truth = s(vec![0.0; e.len()]);
            let pred = s(e);
            let sl1 = loss(&pred, &truth, LossKind::SmoothL1).unwrap();
            let mse = loss(&pred, &truth, LossKind::Mse).unwrap();
            prop_assert!(sl1 <= mse / 2.0 + 0.5 * SMOOTH_L1_BETA + 1e-12);
        }

        #[test]
        fn batch_grad_matches_finite_differences(e in prop::collection::vec(-3.0f64..3.0, 6), mse in any::<bool>()) {
            let kind = if mse { LossKind::Mse } else { LossKind::SmoothL1 };
            let pred = Array2::from_shape_vec((2, 3), e).unwrap();
            let truth = Array2::zeros((2, 3));
            let (_, g) = batch_loss_and_grad(pred.view(), truth.view(), kind);
            let h = 1e-6;
            for idx in 0..6 {
                let (r, c) = (idx / 3, idx % 3);
                let x = pred[[r, c]];
                // skip the non-smooth point of the linear branch
                prop_assume!((x.abs() - SMOOTH_L1_BETA).abs() > 1e-3);
                let mut plus = pred.clone();
                plus[[r, c]] += h;
                let mut minus = pred.clone();
                minus[[r, c]] -= h;
                let fp = batch_loss_and_grad(plus.view(), truth.view(), kind).0;
                let fm = batch_loss_and_grad(minus.view(), truth.view(), kind).0;
                prop_assert!(((fp - fm) / (2.0 * h) - g[[r, c]]).abs() < 1e-7);
            }
        }
    }
}
