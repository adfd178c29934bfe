//! Soft Dice loss, `1 - (2 Σ p·y + s) / (Σ p² + Σ y² + s)`.

/// Default smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

struct DiceTerms {
    inter: f64,
    pred_sq: f64,
    target_sq: f64,
}

fn terms(pred: &[f64], target: &[u8]) -> DiceTerms {
    let mut t = DiceTerms {
        inter: 0.0,
        pred_sq: 0.0,
        target_sq: 0.0,
    };
    for (&p, &y) in pred.iter().zip(target) {
        let y = f64::from(y.min(1));
        t.inter += p * y;
        t.pred_sq += p * p;
        t.target_sq += y * y;
    }
    t
}

/// Panics if the lengths differ.
pub fn dice_loss(pred: &[f64], target: &[u8], smooth: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "dice_loss: length mismatch");
    let t = terms(pred, target);
    1.0 - (2.0 * t.inter + smooth) / (t.pred_sq + t.target_sq + smooth)
}

/// Loss and its gradient with respect to each prediction.
pub fn dice_loss_grad(pred: &[f64], target: &[u8], smooth: f64) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "dice_loss_grad: length mismatch");
    let t = terms(pred, target);
    let num = 2.0 * t.inter + smooth;
    let den = t.pred_sq + t.target_sq + smooth;
    let den_sq = den * den;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| -(2.0 * f64::from(y.min(1)) * den - 2.0 * p * num) / den_sq)
        .collect();
    (1.0 - num / den, grad)
}
