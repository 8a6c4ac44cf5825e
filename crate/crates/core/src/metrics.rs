//! Forecast-quality metrics on flat arrays.
//!
//! Trajectories are flattened `time x points x channels`.

use alloc::vec::Vec;

use crate::math;

/// Mean of `||pred - truth|| / ||truth||` over items. Items whose truth has
/// zero norm are skipped and counted in `excluded`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeL2 {
    pub value: f64,
    pub items: usize,
    pub excluded: usize,
}

pub fn relative_l2_single(pred: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len(), "relative_l2: length mismatch");
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den == 0.0 {
        None
    } else {
        Some(math::sqrt(num) / math::sqrt(den))
    }
}

pub fn relative_l2<'a>(items: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> RelativeL2 {
    let mut sum = 0.0;
    let mut n = 0;
    let mut excluded = 0;
    for (p, t) in items {
        match relative_l2_single(p, t) {
            Some(e) => {
                sum += e;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    RelativeL2 {
        value: if n == 0 { f64::NAN } else { sum / n as f64 },
        items: n,
        excluded,
    }
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mse: length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    /// First half of the frames.
    In,
    /// Second half of the frames.
    Out,
}

/// Frame range `[start, end)` of a horizon for a trajectory of `n_time` frames.
pub fn horizon_frames(n_time: usize, horizon: Horizon) -> (usize, usize) {
    let half = n_time / 2;
    match horizon {
        Horizon::In => (0, half),
        Horizon::Out => (half, n_time),
    }
}

/// MSE over one horizon of a trajectory with `frame_len` values per frame.
pub fn horizon_mse(pred: &[f64], truth: &[f64], frame_len: usize, horizon: Horizon) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let n_time = pred.len() / frame_len;
    let (a, b) = horizon_frames(n_time, horizon);
    mse(&pred[a * frame_len..b * frame_len], &truth[a * frame_len..b * frame_len])
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / math::sqrt(saa * sbb))
    }
}

/// Per-frame spatial correlation of one trajectory.
pub fn correlation_per_frame(pred: &[f64], truth: &[f64], frame_len: usize) -> Vec<Option<f64>> {
    assert_eq!(pred.len(), truth.len());
    pred.chunks(frame_len)
        .zip(truth.chunks(frame_len))
        .map(|(p, t)| pearson(p, t))
        .collect()
}

/// Correlation curve averaged over trajectories; frames with no defined
/// value in any trajectory are `None`.
pub fn correlation_over_time<'a>(
    items: impl IntoIterator<Item = (&'a [f64], &'a [f64])>,
    frame_len: usize,
) -> Vec<Option<f64>> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (p, t) in items {
        let curve = correlation_per_frame(p, t, frame_len);
        if sums.len() < curve.len() {
            sums.resize(curve.len(), (0.0, 0));
        }
        for (s, c) in sums.iter_mut().zip(curve) {
            if let Some(c) = c {
                s.0 += c;
                s.1 += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(s, n)| if n == 0 { None } else { Some(s / n as f64) })
        .collect()
}

/// First frame whose correlation falls below `threshold` (missing values
/// count as below). Returns the curve length if it never does.
pub fn high_correlation_time(curve: &[Option<f64>], threshold: f64) -> usize {
    curve
        .iter()
        .position(|c| c.is_none_or(|c| c < threshold))
        .unwrap_or(curve.len())
}

/// Pointwise mean and population standard deviation across samples.
pub fn ensemble_mean_std(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    if samples.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = alloc::vec![0.0; len];
    for s in samples {
        assert_eq!(s.len(), len);
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut var = alloc::vec![0.0; len];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    (mean, var.into_iter().map(math::sqrt).collect())
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * math::ln(x)).sum::<f64>()
}

/// Fraction of `energy` that falls on the points carrying the top
/// `top_fraction` of `attention` (by count, highest weights first).
pub fn locality_fraction(energy: &[f64], attention: &[f64], top_fraction: f64) -> f64 {
    assert_eq!(energy.len(), attention.len());
    let total: f64 = energy.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    let keep = math::ceil(top_fraction * attention.len() as f64) as usize;
    order[..keep.min(order.len())].iter().map(|&i| energy[i]).sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_l2_reference_values() {
        let t = [1.0, -2.0, 3.0];
        let z = [0.0; 3];
        let d: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
        assert_eq!(relative_l2_single(&t, &t), Some(0.0));
        assert_eq!(relative_l2_single(&z, &t), Some(1.0));
        assert!((relative_l2_single(&d, &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relative_l2_single(&t, &z), None);
    }

    #[test]
    fn affine_prediction_is_perfectly_correlated() {
        let t: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let p: Vec<f64> = t.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson(&p, &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), None);
    }

    #[test]
    fn high_correlation_time_finds_first_drop() {
        let c = [Some(1.0), Some(0.9), Some(0.79), Some(0.95)];
        assert_eq!(high_correlation_time(&c, 0.8), 2);
        assert_eq!(high_correlation_time(&c[..2], 0.8), 2);
        assert_eq!(high_correlation_time(&[Some(0.9), None], 0.8), 1);
    }

    #[test]
    fn constant_offset_mse() {
        let t = [0.5, 1.5, -2.0, 4.0];
        let p: Vec<f64> = t.iter().map(|x| x + 0.25).collect();
        assert!((mse(&p, &t) - 0.0625).abs() < 1e-15);
        assert_eq!(horizon_frames(40, Horizon::In), (0, 20));
        assert_eq!(horizon_frames(40, Horizon::Out), (20, 40));
    }

    #[test]
    fn single_sample_has_zero_spread() {
        let (m, s) = ensemble_mean_std(&[alloc::vec![1.0, 2.0]]);
        assert_eq!(m, alloc::vec![1.0, 2.0]);
        assert_eq!(s, alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn locality_counts_top_attention_points() {
        let energy = [0.0, 9.0, 1.0, 0.0, 0.0];
        let attn = [0.1, 0.5, 0.2, 0.1, 0.1];
        assert!((locality_fraction(&energy, &attn, 0.2) - 0.9).abs() < 1e-12);
        assert!((locality_fraction(&energy, &attn, 0.4) - 1.0).abs() < 1e-12);
    }
}
