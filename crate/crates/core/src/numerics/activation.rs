use crate::math;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Logistic sigmoid, evaluated in the numerically stable branch for each sign.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// Sigmoid clamped to `[PROB_EPS, 1 - PROB_EPS]`; used wherever the output feeds a log.
#[inline]
pub fn sigmoid_clamped(x: f64) -> f64 {
    sigmoid(x).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub fn log_clamped(p: f64) -> f64 {
    math::ln(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// `ln σ(x)` without clamping, stable for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(math::exp(-x))
    } else {
        x - libm::log1p(math::exp(x))
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Binary cross-entropy of a prediction against a 0/1 label.
#[inline]
pub fn bce_loss(pred: f64, label: f64) -> f64 {
    -(label * log_clamped(pred) + (1.0 - label) * log_clamped(1.0 - pred))
}

pub fn bce_mean(preds: &[f64], labels: &[f64]) -> f64 {
    debug_assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / preds.len() as f64
}
