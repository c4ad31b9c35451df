//! Single-channel ablation: knock out one prunable channel at a time and
//! measure what it does to detection quality on clean scenes versus corrupted
//! ones. Channels whose removal costs nothing in-domain but *helps* under
//! corruption are the ones worth pruning away at test time; this study is how
//! that population is made visible.

use crate::detector::{Detection, GtBox, NetworkState, Sample, TrainScope};
use crate::error::Error;
use crate::pruning::ChannelMask;
use crate::tensor::{Real, Shape4, Tape, Tensor4};

use super::eval::evaluate_map50;

/// Effect of removing one channel, as percentage change in mAP relative to
/// the unablated baseline on each evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Prunable layer, in considered order.
    pub layer: usize,
    pub channel: usize,
    /// Quality change on the clean set, in percent of the baseline.
    pub delta_in: Real,
    /// Quality change on the corrupted set, in percent of the baseline.
    pub delta_cross: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// mAP of the intact network on the clean set, in [0, 1].
    pub baseline_in: Real,
    /// mAP of the intact network on the corrupted set, in [0, 1].
    pub baseline_cross: Real,
    /// One row per considered channel, layer-major.
    pub rows: Vec<AblationRow>,
    /// Sign census of the rows: channels whose removal
    /// `[hurts both, hurts clean / helps corrupted, helps clean / hurts
    /// corrupted, helps both]`. Only strictly nonzero pairs are counted, so
    /// the four buckets need not sum to the row count.
    pub quadrants: [usize; 4],
}

/// mAP@50 of the detector over a labeled set, optionally under a channel
/// mask, with plain evaluation-mode forward passes.
pub fn evaluate_detector(
    state: &NetworkState,
    data: &[Sample],
    mask: Option<&ChannelMask>,
    batch_size: usize,
) -> Result<Real, Error> {
    let mut detections: Vec<Vec<Detection>> = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size) {
        let s = chunk[0].image.shape();
        let mut pixels = Vec::with_capacity(chunk.len() * s.c * s.h * s.w);
        for sample in chunk {
            pixels.extend_from_slice(sample.image.data());
        }
        let images = Tensor4::new(Shape4::new(chunk.len(), s.c, s.h, s.w), pixels)?;
        let mut tape = Tape::new();
        let out = state.forward(&mut tape, &images, mask, TrainScope::None)?;
        detections.extend(out.detections);
    }
    let ground_truth: Vec<Vec<GtBox>> = data.iter().map(|s| s.boxes.clone()).collect();
    Ok(evaluate_map50(&detections, &ground_truth, state.spec.classes).map)
}

fn percent_delta(ablated: Real, baseline: Real) -> Real {
    // A near-zero baseline makes the ratio meaningless; report no change
    // rather than a multi-thousand-percent artifact.
    if baseline <= 1e-9 {
        0.0
    } else {
        100.0 * (ablated - baseline) / baseline
    }
}

/// Evaluates every considered channel's single-channel knockout against the
/// intact baseline on both sets. The baselines are computed once and shared
/// by every row.
pub fn channel_ablation_study(
    state: &NetworkState,
    in_set: &[Sample],
    cross_set: &[Sample],
    batch_size: usize,
) -> Result<AblationReport, Error> {
    if in_set.is_empty() || cross_set.is_empty() || batch_size == 0 {
        return Err(Error::Config("ablation needs both evaluation sets and a batch size".into()));
    }
    let widths = state.spec.considered_channels();
    let baseline_in = evaluate_detector(state, in_set, None, batch_size)?;
    let baseline_cross = evaluate_detector(state, cross_set, None, batch_size)?;

    let mut rows = Vec::with_capacity(widths.iter().sum());
    let mut quadrants = [0usize; 4];
    for (layer, &width) in widths.iter().enumerate() {
        for channel in 0..width {
            let mut mask = ChannelMask::all_alive(&widths);
            mask.alive[layer][channel] = false;
            let map_in = evaluate_detector(state, in_set, Some(&mask), batch_size)?;
            let map_cross = evaluate_detector(state, cross_set, Some(&mask), batch_size)?;
            let delta_in = percent_delta(map_in, baseline_in);
            let delta_cross = percent_delta(map_cross, baseline_cross);
            if delta_in != 0.0 && delta_cross != 0.0 {
                let idx = match (delta_in < 0.0, delta_cross < 0.0) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                quadrants[idx] += 1;
            }
            rows.push(AblationRow { layer, channel, delta_in, delta_cross });
        }
    }
    Ok(AblationReport { baseline_in, baseline_cross, rows, quadrants })
}

impl AblationReport {
    /// CSV form: one row per channel plus a leading pseudo-row
    /// (`channel=-1, layer=-1`) carrying the absolute baseline scores in the
    /// delta columns.
    pub fn csv(&self) -> String {
        let mut out = String::from("channel,layer,delta_in,delta_cross\n");
        out.push_str(&format!("-1,-1,{:.12},{:.12}\n", self.baseline_in, self.baseline_cross));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.12},{:.12}\n",
                r.channel, r.layer, r.delta_in, r.delta_cross
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::config::{ExperimentConfig, Profile};
    use super::super::scene::generate_source;
    use super::*;
    use crate::detector::{finalize_bn_stats, pid, pretrain_source, CONSIDERED_BN};

    fn small_world() -> (NetworkState, Vec<Sample>, Vec<Sample>) {
        let mut cfg = ExperimentConfig::preset(Profile::Ci);
        cfg.reseed(5);
        let data = generate_source(&cfg.scene, 8).unwrap();
        cfg.pretrain.epochs = 0;
        let (mut state, _) = pretrain_source(cfg.network.clone(), &data, &cfg.pretrain).unwrap();
        finalize_bn_stats(&mut state, &data, 4).unwrap();
        let (a, b) = data.split_at(4);
        (state, a.to_vec(), b.to_vec())
    }

    #[test]
    fn dead_channel_ablates_to_exactly_zero_deltas() {
        let (mut state, in_set, cross_set) = small_world();
        // Zero both the scale and the shift of one channel: its output is
        // already identically zero, so masking it cannot change a thing.
        let layer = 1;
        let channel = 3;
        state.considered_gamma_mut(layer)[channel] = 0.0;
        let beta_id = pid::BN_BETA[CONSIDERED_BN[layer]];
        state.param_mut(beta_id).data_mut()[channel] = 0.0;

        let report = channel_ablation_study(&state, &in_set, &cross_set, 4).unwrap();
        let row = report
            .rows
            .iter()
            .find(|r| r.layer == layer && r.channel == channel)
            .expect("every considered channel gets a row");
        assert_eq!(row.delta_in, 0.0);
        assert_eq!(row.delta_cross, 0.0);

        let total: usize = state.spec.considered_channels().iter().sum();
        assert_eq!(report.rows.len(), total);
        let counted: usize = report.quadrants.iter().sum();
        let nonzero =
            report.rows.iter().filter(|r| r.delta_in != 0.0 && r.delta_cross != 0.0).count();
        assert_eq!(counted, nonzero);

        let csv = report.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "channel,layer,delta_in,delta_cross");
        assert!(lines.next().unwrap().starts_with("-1,-1,"));
        assert_eq!(csv.lines().count(), total + 2);
    }
}
