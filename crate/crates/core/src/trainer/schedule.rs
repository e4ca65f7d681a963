//! Linear-warmup cosine learning-rate schedule.

use std::f64::consts::PI;

/// Learning rate at `step` of `total`.
///
/// Ramps linearly from 0 to `peak` over the first `warmup` steps, then
/// follows half a cosine from `peak` down to `floor` at `step == total`.
/// Steps past `total` stay at `floor`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, peak: f64, floor: f64) -> f64 {
    debug_assert!(warmup < total, "warmup {warmup} must be below total {total}");
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return floor;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (PI * progress).cos())
}
