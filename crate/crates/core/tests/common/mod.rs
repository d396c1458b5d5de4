//! Independent oracles shared by the integration targets.

/// Straight-line scalar AdamW written from the update rule alone.
pub fn adamw_reference(theta0: f64, grads: &[f64], lrs: &[f64], b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta = theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
    }
    theta
}
