/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f32) -> f32 {
    let x = x as f64;
    (x.min(0.0) - (-x.abs()).exp().ln_1p()) as f32
}

/// `d/dx log(sigmoid(x)) = sigmoid(-x)`.
pub fn log_sigmoid_grad(x: f32) -> f32 {
    let x = x as f64;
    if x >= 0.0 {
        let e = (-x).exp();
        (e / (1.0 + e)) as f32
    } else {
        (1.0 / (1.0 + x.exp())) as f32
    }
}

/// Row-wise softmax of a `[B, C]` matrix.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
    out
}

/// Mean cross-entropy of `[B, C]` logits against integer labels, with the
/// gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> (f32, Vec<f32>) {
    let batch = labels.len();
    assert_eq!(logits.len(), batch * classes);
    let mut probs = softmax_rows(logits, classes);
    let mut loss = 0.0f64;
    for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
        loss -= (row[label] as f64).max(1e-30).ln();
        row[label] -= 1.0;
        row.iter_mut().for_each(|g| *g /= batch as f32);
    }
    ((loss / batch as f64) as f32, probs)
}
