//! Small dense kernels used by the forward pass. Everything accumulates in
//! at-least-32-bit floats; the attention-score path in `model::scores` uses
//! f64 on top of these.

/// Dot product with four independent accumulators. The lane split keeps the
/// reduction order fixed, so results are identical across runs of the same
/// build.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    for i in chunks * 4..a.len() {
        acc[0] += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Dot product of two f32 slices accumulated in f64.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// `y = W x` for a row-major `[rows, cols]` matrix.
pub fn matvec(w: &[f32], rows: usize, cols: usize, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        y[r] = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

pub const RMS_NORM_EPS: f32 = 1e-5;

/// RMS normalization with learned gain: `x / rms(x) * g`.
pub fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), gain.len());
    let ms = dot(x, x) / x.len() as f32;
    let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * inv * gain[i];
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// In-place numerically stable softmax (max subtraction, plain summation).
pub fn softmax_in_place(scores: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &s in scores.iter() {
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    for s in scores.iter_mut() {
        *s *= inv;
    }
}

/// Index of the largest value; ties break toward the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Rotary rotation of `v` (laid out as `heads * head_dim`) at `position`.
///
/// Non-interleaved pairing: coordinate `i` pairs with `i + head_dim/2`, the
/// pair at index `i` rotating by `position * theta^(-2i/head_dim)`.
pub fn apply_rope(v: &mut [f32], heads: usize, head_dim: usize, position: usize, theta: f64) {
    debug_assert_eq!(v.len(), heads * head_dim);
    debug_assert_eq!(head_dim % 2, 0);
    let half = head_dim / 2;
    for h in 0..heads {
        let base = h * head_dim;
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = position as f64 * freq;
            let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
            let a = v[base + i];
            let b = v[base + i + half];
            v[base + i] = a * cos - b * sin;
            v[base + i + half] = a * sin + b * cos;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32) * 0.25 - 3.0).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.0 - (i as f32) * 0.125).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-3);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut s = vec![1.0, 2.0, 3.0, -50.0];
        softmax_in_place(&mut s);
        let sum: f32 = s.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(s[2] > s[1] && s[1] > s[0]);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let mut v = vec![0.3, -1.0, 2.0, 0.5];
        let orig = v.clone();
        apply_rope(&mut v, 1, 4, 0, 10_000.0);
        assert_eq!(v, orig);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut v = vec![0.3, -1.0, 2.0, 0.5];
        let before = (v[0] * v[0] + v[2] * v[2], v[1] * v[1] + v[3] * v[3]);
        apply_rope(&mut v, 1, 4, 17, 10_000.0);
        let after = (v[0] * v[0] + v[2] * v[2], v[1] * v[1] + v[3] * v[3]);
        assert!((before.0 - after.0).abs() < 1e-5);
        assert!((before.1 - after.1).abs() < 1e-5);
    }
}
