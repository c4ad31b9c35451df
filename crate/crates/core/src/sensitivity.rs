//! Domain-sensitivity weights for the prunable channels.
//!
//! A channel is *sensitive* when its current feature responses have drifted
//! from the stored source references. Drift is measured twice per considered
//! layer — over whole pre-normalization maps, and over pooled patches of the
//! confident foreground RoIs — as a mean absolute deviation per channel. Each
//! score vector is normalized to mean one over the layer's channels, the two
//! views are summed, and the sum is normalized again, so the final weights
//! always average one and only the *relative* drift between channels
//! matters. The computation is read-only: it never touches the tape and adds
//! nothing to the compute ledger.

use crate::detector::{ForwardOut, NetworkState, CONSIDERED_BN};
use crate::stats::SourceStats;
use crate::tensor::{OpCounters, Real, RoiBox, Tape, Tensor4};

/// Per-channel mean absolute deviation of a stack of maps from a reference:
/// `S[c] = sum over samples and positions of |x - ref| / (N * D)`.
pub fn mean_abs_deviation(stack: &Tensor4, reference: &Tensor4) -> Vec<Real> {
    let s = stack.shape();
    let r = reference.shape();
    assert_eq!(r.n, 1, "reference must be a single mean map");
    assert_eq!(s.c, r.c, "channel mismatch");
    assert_eq!(s.plane(), r.plane(), "spatial mismatch");
    let d = s.plane();
    let mut out = vec![0.0; s.c];
    if s.n == 0 || d == 0 {
        return out;
    }
    for n in 0..s.n {
        for c in 0..s.c {
            let m = reference.plane(0, c);
            let acc: Real =
                stack.plane(n, c).iter().zip(m).map(|(&x, &y)| (x - y).abs()).sum();
            out[c] += acc;
        }
    }
    let inv = 1.0 / (s.n * d) as Real;
    for v in out.iter_mut() {
        *v *= inv;
    }
    out
}

/// Scale scores to mean one: `w[c] = C * s[c] / sum(s)`. A degenerate vector
/// (all scores below 1e-12 in total, or empty input) yields uniform ones —
/// no evidence means no preference.
pub fn normalize_weights(scores: &[Real]) -> Vec<Real> {
    let c = scores.len();
    let total: Real = scores.iter().sum();
    if c == 0 || total < 1e-12 {
        return vec![1.0; c];
    }
    scores.iter().map(|&s| c as Real * s / total).collect()
}

/// Combine the image-level and instance-level views. Either side may be
/// absent (for example, no confident RoI this batch); with both missing the
/// weights are uniform.
pub fn combined_weights(s_img: Option<&[Real]>, s_ins: Option<&[Real]>, channels: usize) -> Vec<Real> {
    match (s_img, s_ins) {
        (Some(a), Some(b)) => {
            assert_eq!(a.len(), channels);
            assert_eq!(b.len(), channels);
            let wa = normalize_weights(a);
            let wb = normalize_weights(b);
            let sum: Vec<Real> = wa.iter().zip(&wb).map(|(&x, &y)| x + y).collect();
            normalize_weights(&sum)
        }
        (Some(a), None) => normalize_weights(a),
        (None, Some(b)) => normalize_weights(b),
        (None, None) => vec![1.0; channels],
    }
}

/// Per considered layer: raw drift scores and the final weights.
#[derive(Debug, Clone)]
pub struct LayerSensitivity {
    pub s_img: Vec<Real>,
    /// Absent when no confident foreground RoI was available.
    pub s_ins: Option<Vec<Real>>,
    pub omega: Vec<Real>,
}

/// Evaluate sensitivity for one target batch against the source references.
/// `picked` indexes the confident foreground records of `out`.
pub fn batch_sensitivity(
    state: &NetworkState,
    tape: &Tape,
    out: &ForwardOut,
    stats: &SourceStats,
    picked: &[usize],
) -> Vec<LayerSensitivity> {
    let spec = &state.spec;
    let resolutions = spec.considered_resolutions();
    let r = spec.roi_size;
    let mut scratch = OpCounters::default();
    CONSIDERED_BN
        .iter()
        .enumerate()
        .map(|(l, &bn)| {
            let feat = tape.value(out.pre_bn[bn]);
            let s_img = mean_abs_deviation(feat, &stats.image_mean[l]);
            let s_ins = if picked.is_empty() {
                None
            } else {
                let stride = spec.image_size as Real / resolutions[l] as Real;
                let boxes: Vec<RoiBox> = picked
                    .iter()
                    .map(|&i| {
                        let rec = &out.records[i];
                        RoiBox {
                            batch: rec.image,
                            x0: rec.x0,
                            y0: rec.y0,
                            x1: rec.x1,
                            y1: rec.y1,
                        }
                        .scaled(1.0 / stride)
                    })
                    .collect();
                let patches = crate::tensor::ops::roi_align_values(
                    feat,
                    &boxes,
                    (r, r),
                    None,
                    &mut scratch,
                );
                Some(mean_abs_deviation(&patches, &stats.roi_mean[l]))
            };
            let omega = combined_weights(Some(&s_img), s_ins.as_deref(), s_img.len());
            LayerSensitivity { s_img, s_ins, omega }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn two_channel_hand_case() {
        // one image, two channels, one position: target [3, 1], source [1, 1]
        let target = Tensor4::new(Shape4::new(1, 2, 1, 1), vec![3.0, 1.0]).unwrap();
        let source = Tensor4::new(Shape4::new(1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
        let s = mean_abs_deviation(&target, &source);
        assert_eq!(s, vec![2.0, 0.0]);
        let w = normalize_weights(&s);
        assert_eq!(w, vec![2.0, 0.0]);
        let mean: Real = w.iter().sum::<Real>() / w.len() as Real;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deviation_averages_over_samples_and_positions() {
        // two images, one channel, two positions
        let target =
            Tensor4::new(Shape4::new(2, 1, 1, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let source = Tensor4::new(Shape4::new(1, 1, 1, 2), vec![2.0, 2.0]).unwrap();
        // |1-2|+|3-2|+|5-2|+|7-2| = 10, over N*D = 4
        let s = mean_abs_deviation(&target, &source);
        assert!((s[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn weights_are_scale_invariant_and_mean_one() {
        let s = vec![0.4, 1.3, 0.0, 2.9, 0.7];
        let w1 = normalize_weights(&s);
        let scaled: Vec<Real> = s.iter().map(|&x| x * 731.0).collect();
        let w2 = normalize_weights(&scaled);
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean: Real = w1.iter().sum::<Real>() / w1.len() as Real;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn growing_one_channels_drift_shifts_weight_toward_it() {
        let base = vec![1.0, 1.0, 1.0, 1.0];
        let w0 = normalize_weights(&base);
        let mut bumped = base.clone();
        bumped[2] = 3.0;
        let w1 = normalize_weights(&bumped);
        assert!(w1[2] > w0[2]);
        assert!(w1[0] < w0[0]);
        // ordering by score is preserved in the weights
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| bumped[b].partial_cmp(&bumped[a]).unwrap());
        let mut worder: Vec<usize> = (0..4).collect();
        worder.sort_by(|&a, &b| w1[b].partial_cmp(&w1[a]).unwrap());
        assert_eq!(order, worder);
    }

    #[test]
    fn degenerate_scores_give_uniform_weights() {
        assert_eq!(normalize_weights(&[0.0, 0.0, 0.0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(normalize_weights(&[1e-13, 0.0]), vec![1.0, 1.0]);
        assert_eq!(normalize_weights(&[]), Vec::<Real>::new());
        // identical target and source maps
        let t = Tensor4::new(Shape4::new(3, 2, 2, 2), vec![0.5; 24]).unwrap();
        let m = Tensor4::new(Shape4::new(1, 2, 2, 2), vec![0.5; 8]).unwrap();
        let s = mean_abs_deviation(&t, &m);
        assert_eq!(normalize_weights(&s), vec![1.0, 1.0]);
    }

    #[test]
    fn combination_keeps_mean_one_and_handles_missing_views() {
        let img = vec![2.0, 1.0, 0.0, 1.0];
        let ins = vec![0.0, 0.0, 4.0, 0.0];
        let w = combined_weights(Some(&img), Some(&ins), 4);
        let mean: Real = w.iter().sum::<Real>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-9);
        // the channel drifting only at instance level still gets weight
        assert!(w[2] > 0.5);
        // missing instance view falls back to the image view alone
        let w_img_only = combined_weights(Some(&img), None, 4);
        assert_eq!(w_img_only, normalize_weights(&img));
        assert_eq!(combined_weights(None, None, 3), vec![1.0, 1.0, 1.0]);
    }
}
