/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

pub fn loss_classify(logits: &[f64], label: usize) -> f64 {
    cross_entropy(logits, label).0
}

/// `max(0, margin − (hi − lo))` with gradients for `(hi, lo)`.
pub fn margin_rank(score_hi: f64, score_lo: f64, margin: f64) -> (f64, f64, f64) {
    let gap = margin - (score_hi - score_lo);
    if gap > 0.0 {
        (gap, -1.0, 1.0)
    } else {
        (0.0, 0.0, 0.0)
    }
}

pub fn loss_margin_rank(score_hi: f64, score_lo: f64, margin: f64) -> f64 {
    margin_rank(score_hi, score_lo, margin).0
}

/// Mean squared error and its gradient.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    (loss, grad)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
