use crate::error::{Error, Result};

/// Smallest / largest probability the losses will take a log of.
pub const PROB_EPS: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to each
/// prediction. Predictions are clamped to `[1e-7, 1 - 1e-7]`; a clamped
/// prediction has zero gradient.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs labels",
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("prediction batch".into()));
    }
    let m = predictions.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(predictions.len());
    for (&p, &y) in predictions.iter().zip(labels) {
        let (loss, g) = bce_item(p, y)?;
        total += loss;
        grad.push(g / m);
    }
    Ok((total / m, grad))
}

/// Per-item BCE and `∂ℓ/∂ŷ`.
pub fn bce_item(p: f64, y: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("prediction {p} outside [0, 1]")));
    }
    if y != 0.0 && y != 1.0 {
        return Err(Error::InvalidInput(format!("label {y} is not 0 or 1")));
    }
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = -y * clamped.ln() - (1.0 - y) * (1.0 - clamped).ln();
    let grad = if clamped != p {
        0.0
    } else {
        -y / p + (1.0 - y) / (1.0 - p)
    };
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let (l, _) = bce_loss(&[1.0 - 1e-12], &[1.0]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn coin_flip_is_ln2() {
        let (l, g) = bce_loss(&[0.5], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn two_item_mean() {
        let (l, _) = bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (p, y) = (0.37, 1.0);
        let h = 1e-7;
        let fd = (bce_item(p + h, y).unwrap().0 - bce_item(p - h, y).unwrap().0) / (2.0 * h);
        assert!((bce_item(p, y).unwrap().1 - fd).abs() < 1e-6);
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(
            bce_loss(&[0.5, 0.5], &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(bce_loss(&[], &[]).is_err());
        assert!(bce_loss(&[1.5], &[1.0]).is_err());
        assert!(bce_loss(&[0.5], &[2.0]).is_err());
    }
}
