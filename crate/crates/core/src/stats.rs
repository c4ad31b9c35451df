//! Source-domain feature statistics, collected once after pretraining and
//! consumed read-only during adaptation.
//!
//! Three families are recorded from clean source images run through the
//! frozen source model:
//!
//! * per considered layer, the mean *pre-normalization* feature map over
//!   images, and the mean pooled RoI patch over confident foreground RoIs
//!   (confidence-weighted by default) — the references that drift is
//!   measured against;
//! * the mean and diagonal variance of the image-level pooled feature;
//! * the same moments per predicted class over instance-level pooled
//!   features, with how many instances contributed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, KIND_SOURCE_STATS};
use crate::detector::{
    select_foreground_rois, NetworkSpec, NetworkState, Sample, TrainScope, CONSIDERED_BN,
};
use crate::error::Error;
use crate::tensor::{OpCounters, Real, RoiBox, Shape4, Tape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub batch_size: usize,
    /// Weight each foreground RoI by its foreground confidence when averaging
    /// RoI features; unweighted treats every selected RoI equally.
    pub confidence_weighted: bool,
    /// Classes with fewer contributing instances than this are flagged
    /// unusable for class-conditional alignment.
    pub min_class_samples: usize,
    pub var_floor: Real,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            batch_size: 8,
            confidence_weighted: true,
            min_class_samples: 10,
            var_floor: 1e-6,
        }
    }
}

/// Frozen description of the source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    /// Mean pre-normalization map per considered layer, (1, C, H, W).
    pub image_mean: Vec<Tensor4>,
    /// Mean pooled RoI patch per considered layer, (1, C, r, r).
    pub roi_mean: Vec<Tensor4>,
    /// Image-level pooled feature moments.
    pub global_mean: Vec<Real>,
    pub global_var: Vec<Real>,
    /// Instance-level pooled feature moments per class.
    pub class_mean: Vec<Vec<Real>>,
    pub class_var: Vec<Vec<Real>>,
    pub class_count: Vec<u64>,
    pub images_seen: u64,
    pub rois_seen: u64,
}

impl SourceStats {
    pub fn class_usable(&self, class: usize, min_samples: usize) -> bool {
        self.class_count[class] >= min_samples as u64
    }

    /// Pass every stored value through 32-bit precision, matching what an
    /// archive round trip produces.
    pub fn quantize_f32(&mut self) {
        for t in self.image_mean.iter_mut().chain(self.roi_mean.iter_mut()) {
            *t = t.quantized_f32();
        }
        let q = |v: &mut Vec<Real>| {
            for x in v.iter_mut() {
                *x = *x as f32 as Real;
            }
        };
        q(&mut self.global_mean);
        q(&mut self.global_var);
        self.class_mean.iter_mut().for_each(&q);
        self.class_var.iter_mut().for_each(&q);
    }
}

/// Streaming per-dimension mean and variance.
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    count: Real,
    mean: Vec<Real>,
    m2: Vec<Real>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn push(&mut self, x: &[Real]) {
        debug_assert_eq!(x.len(), self.mean.len());
        self.count += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn count(&self) -> Real {
        self.count
    }

    /// Population mean and variance, variance floored.
    pub fn finalize(&self, floor: Real) -> (Vec<Real>, Vec<Real>) {
        let mean = self.mean.clone();
        let var = if self.count > 0.0 {
            self.m2.iter().map(|&s| (s / self.count).max(floor)).collect()
        } else {
            vec![floor; self.mean.len()]
        };
        (mean, var)
    }
}

/// Streaming weighted mean of flat vectors.
#[derive(Debug, Clone)]
pub(crate) struct WeightedMean {
    sum: Vec<Real>,
    total: Real,
}

impl WeightedMean {
    pub fn new(dim: usize) -> Self {
        WeightedMean { sum: vec![0.0; dim], total: 0.0 }
    }

    pub fn push(&mut self, x: &[Real], w: Real) {
        debug_assert_eq!(x.len(), self.sum.len());
        for i in 0..x.len() {
            self.sum[i] += w * x[i];
        }
        self.total += w;
    }

    pub fn finalize(&self) -> Vec<Real> {
        if self.total == 0.0 {
            return vec![0.0; self.sum.len()];
        }
        self.sum.iter().map(|&s| s / self.total).collect()
    }
}

/// Run the frozen model over source images and reduce the feature streams.
/// Labels in `data` are ignored — instances enter by predicted class, the
/// same signal available on unlabeled target streams.
pub fn collect_source_stats(
    state: &NetworkState,
    data: &[Sample],
    cfg: &StatsConfig,
) -> Result<SourceStats, Error> {
    if data.is_empty() {
        return Err(Error::Stats("no images given for statistics collection".into()));
    }
    let spec = &state.spec;
    let channels = spec.considered_channels();
    let resolutions = spec.considered_resolutions();
    let r = spec.roi_size;
    let c4 = spec.widths[3];
    let k = spec.classes;

    let mut image_sum: Vec<Vec<Real>> = channels
        .iter()
        .zip(&resolutions)
        .map(|(&c, &res)| vec![0.0; c * res * res])
        .collect();
    let mut roi_means: Vec<WeightedMean> =
        channels.iter().map(|&c| WeightedMean::new(c * r * r)).collect();
    let mut global = Welford::new(c4);
    let mut per_class: Vec<Welford> = (0..k).map(|_| Welford::new(c4)).collect();
    let mut images_seen = 0u64;
    let mut rois_seen = 0u64;

    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let images = stack(chunk);
        let mut tape = Tape::new();
        let out = state.forward(&mut tape, &images, None, TrainScope::None)?;

        // mean pre-normalization maps, accumulated image by image
        for (l, &bn) in CONSIDERED_BN.iter().enumerate() {
            let v = tape.value(out.pre_bn[bn]);
            let s = v.shape();
            let per_image = s.c * s.plane();
            for n in 0..s.n {
                let img = &v.data()[n * per_image..(n + 1) * per_image];
                for (acc, &x) in image_sum[l].iter_mut().zip(img) {
                    *acc += x;
                }
            }
        }
        images_seen += chunk.len() as u64;

        // image-level pooled feature: spatial mean of the final map
        let pooled_imgs = tape.spatial_mean(out.stage4, None);
        let pv = tape.value(pooled_imgs);
        for n in 0..chunk.len() {
            global.push(&pv.data()[n * c4..(n + 1) * c4]);
        }

        // confident foreground instances
        let picked = select_foreground_rois(&out.records, spec.background_threshold, spec.max_rois);
        if picked.is_empty() {
            continue;
        }
        rois_seen += picked.len() as u64;

        // instance-level pooled features by predicted class
        if let Some(roi_pooled) = out.roi_pooled {
            let inst = tape.spatial_mean(roi_pooled, None);
            let iv = tape.value(inst);
            for &i in &picked {
                let rec = &out.records[i];
                per_class[rec.class].push(&iv.data()[i * c4..(i + 1) * c4]);
            }
        }

        // per-layer pooled RoI patches from the pre-normalization maps
        let mut scratch = OpCounters::default();
        for (l, &bn) in CONSIDERED_BN.iter().enumerate() {
            let stride = spec.image_size as Real / resolutions[l] as Real;
            let boxes: Vec<RoiBox> = picked
                .iter()
                .map(|&i| {
                    let rec = &out.records[i];
                    RoiBox { batch: rec.image, x0: rec.x0, y0: rec.y0, x1: rec.x1, y1: rec.y1 }
                        .scaled(1.0 / stride)
                })
                .collect();
            let feat = tape.value(out.pre_bn[bn]);
            let patches =
                crate::tensor::ops::roi_align_values(feat, &boxes, (r, r), None, &mut scratch);
            let per_roi = channels[l] * r * r;
            for (j, &i) in picked.iter().enumerate() {
                let w = if cfg.confidence_weighted { out.records[i].fg_confidence } else { 1.0 };
                roi_means[l].push(&patches.data()[j * per_roi..(j + 1) * per_roi], w);
            }
        }
    }

    let image_mean = image_sum
        .into_iter()
        .zip(channels.iter().zip(&resolutions))
        .map(|(sum, (&c, &res))| {
            let inv = 1.0 / images_seen as Real;
            let data = sum.into_iter().map(|x| x * inv).collect();
            Tensor4::from_raw_unchecked(Shape4::new(1, c, res, res), data)
        })
        .collect();
    let roi_mean = roi_means
        .iter()
        .zip(channels.iter())
        .map(|(wm, &c)| Tensor4::from_raw_unchecked(Shape4::new(1, c, r, r), wm.finalize()))
        .collect();
    let (global_mean, global_var) = global.finalize(cfg.var_floor);
    let mut class_mean = Vec::with_capacity(k);
    let mut class_var = Vec::with_capacity(k);
    let mut class_count = Vec::with_capacity(k);
    for w in &per_class {
        let (m, v) = w.finalize(cfg.var_floor);
        class_mean.push(m);
        class_var.push(v);
        class_count.push(w.count() as u64);
    }
    Ok(SourceStats {
        image_mean,
        roi_mean,
        global_mean,
        global_var,
        class_mean,
        class_var,
        class_count,
        images_seen,
        rois_seen,
    })
}

fn stack(samples: &[Sample]) -> Tensor4 {
    let s0 = samples[0].image.shape();
    let shape = Shape4::new(samples.len(), s0.c, s0.h, s0.w);
    let mut data = Vec::with_capacity(shape.numel());
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    Tensor4::from_raw_unchecked(shape, data)
}

fn vec_tensor(v: &[Real]) -> Tensor4 {
    Tensor4::from_raw_unchecked(Shape4::vector(v.len()), v.to_vec())
}

/// Serialize statistics next to the architecture hash of the model that
/// produced them. Values quantize to 32-bit on write.
pub fn save_source_stats(
    path: &Path,
    stats: &SourceStats,
    spec: &NetworkSpec,
) -> Result<(), Error> {
    let names = spec.considered_names();
    let mut sections: Vec<(String, Tensor4)> = Vec::new();
    for (l, name) in names.iter().enumerate() {
        sections.push((format!("{name}.image_mean"), stats.image_mean[l].clone()));
        sections.push((format!("{name}.roi_mean"), stats.roi_mean[l].clone()));
    }
    sections.push(("global.mean".into(), vec_tensor(&stats.global_mean)));
    sections.push(("global.var".into(), vec_tensor(&stats.global_var)));
    for class in 0..spec.classes {
        sections.push((format!("class{class}.mean"), vec_tensor(&stats.class_mean[class])));
        sections.push((format!("class{class}.var"), vec_tensor(&stats.class_var[class])));
    }
    let counts: Vec<Real> = stats.class_count.iter().map(|&c| c as Real).collect();
    sections.push(("class.counts".into(), vec_tensor(&counts)));
    sections.push((
        "meta.seen".into(),
        vec_tensor(&[stats.images_seen as Real, stats.rois_seen as Real]),
    ));
    write_archive(path, KIND_SOURCE_STATS, &spec.spec_hash(), &sections)
}

/// Load statistics for exactly this spec, auditing every section shape.
pub fn load_source_stats(path: &Path, spec: &NetworkSpec) -> Result<SourceStats, Error> {
    let sections = read_archive(path, KIND_SOURCE_STATS, Some(&spec.spec_hash()))?;
    let mut by_name: std::collections::BTreeMap<String, Tensor4> = sections.into_iter().collect();
    let mut take = |name: String| {
        by_name
            .remove(&name)
            .ok_or_else(|| Error::Archive(format!("statistics file is missing section `{name}`")))
    };
    let names = spec.considered_names();
    let channels = spec.considered_channels();
    let resolutions = spec.considered_resolutions();
    let r = spec.roi_size;
    let c4 = spec.widths[3];
    let mut image_mean = Vec::new();
    let mut roi_mean = Vec::new();
    for (l, name) in names.iter().enumerate() {
        let im = take(format!("{name}.image_mean"))?;
        let expect = Shape4::new(1, channels[l], resolutions[l], resolutions[l]);
        if im.shape() != expect {
            return Err(Error::Archive(format!(
                "section `{name}.image_mean` shape {} does not match {expect}",
                im.shape()
            )));
        }
        let rm = take(format!("{name}.roi_mean"))?;
        let expect = Shape4::new(1, channels[l], r, r);
        if rm.shape() != expect {
            return Err(Error::Archive(format!(
                "section `{name}.roi_mean` shape {} does not match {expect}",
                rm.shape()
            )));
        }
        image_mean.push(im);
        roi_mean.push(rm);
    }
    let expect_vec = |t: &Tensor4, dim: usize, what: &str| {
        if t.data().len() != dim {
            return Err(Error::Archive(format!(
                "section `{what}` length {} does not match {dim}",
                t.data().len()
            )));
        }
        Ok(t.data().to_vec())
    };
    let global_mean = expect_vec(&take("global.mean".into())?, c4, "global.mean")?;
    let global_var = expect_vec(&take("global.var".into())?, c4, "global.var")?;
    let mut class_mean = Vec::new();
    let mut class_var = Vec::new();
    for class in 0..spec.classes {
        class_mean.push(expect_vec(
            &take(format!("class{class}.mean"))?,
            c4,
            &format!("class{class}.mean"),
        )?);
        class_var.push(expect_vec(
            &take(format!("class{class}.var"))?,
            c4,
            &format!("class{class}.var"),
        )?);
    }
    let counts = expect_vec(&take("class.counts".into())?, spec.classes, "class.counts")?;
    let meta = expect_vec(&take("meta.seen".into())?, 2, "meta.seen")?;
    Ok(SourceStats {
        image_mean,
        roi_mean,
        global_mean,
        global_var,
        class_mean,
        class_var,
        class_count: counts.iter().map(|&c| c as u64).collect(),
        images_seen: meta[0] as u64,
        rois_seen: meta[1] as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::GtBox;

    fn small_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::default();
        spec.image_size = 32;
        spec.widths = [8, 8, 16, 16];
        spec.fc_dim = 32;
        spec
    }

    fn textured_dataset(spec: &NetworkSpec, n: usize) -> Vec<Sample> {
        let s = spec.image_size;
        (0..n)
            .map(|i| {
                let mut data = vec![0.0; spec.in_channels * s * s];
                let mut seed = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(7);
                for v in data.iter_mut() {
                    seed ^= seed >> 12;
                    seed ^= seed << 25;
                    seed ^= seed >> 27;
                    *v = (seed.wrapping_mul(0x2545_f491_4f6c_dd1d) >> 40) as Real
                        / (1u64 << 24) as Real;
                }
                let image = Tensor4::new(Shape4::new(1, spec.in_channels, s, s), data).unwrap();
                Sample {
                    image,
                    boxes: vec![GtBox { x0: 4.0, y0: 4.0, x1: 18.0, y1: 18.0, class: i % 3 }],
                }
            })
            .collect()
    }

    #[test]
    fn welford_matches_two_pass_reference() {
        let vectors: Vec<Vec<Real>> = (0..40)
            .map(|i| {
                (0..5)
                    .map(|j| ((i * 7 + j * 13) % 23) as Real * 0.37 - 2.0 + (i as Real) * 0.01)
                    .collect()
            })
            .collect();
        let mut w = Welford::new(5);
        for v in &vectors {
            w.push(v);
        }
        let (mean, var) = w.finalize(0.0);
        for j in 0..5 {
            let m_ref: Real = vectors.iter().map(|v| v[j]).sum::<Real>() / 40.0;
            let v_ref: Real =
                vectors.iter().map(|v| (v[j] - m_ref) * (v[j] - m_ref)).sum::<Real>() / 40.0;
            assert!((mean[j] - m_ref).abs() / m_ref.abs().max(1.0) < 1e-5);
            assert!((var[j] - v_ref).abs() / v_ref.abs().max(1e-9) < 1e-5);
        }
    }

    #[test]
    fn weighted_mean_hand_case() {
        // features [1, 5] and [3, 1] with weights 1 and 3: (1+9)/4, (5+3)/4
        let mut wm = WeightedMean::new(2);
        wm.push(&[1.0, 5.0], 1.0);
        wm.push(&[3.0, 1.0], 3.0);
        let m = wm.finalize();
        assert!((m[0] - 2.5).abs() < 1e-12);
        assert!((m[1] - 2.0).abs() < 1e-12);
        // zero total weight collapses to zero, not NaN
        let empty = WeightedMean::new(2).finalize();
        assert_eq!(empty, vec![0.0, 0.0]);
    }

    #[test]
    fn collection_shapes_and_batch_invariance() {
        let spec = small_spec();
        let state = NetworkState::init(spec.clone(), 8).unwrap();
        let data = textured_dataset(&spec, 6);
        let cfg = StatsConfig { batch_size: 2, ..Default::default() };
        let stats = collect_source_stats(&state, &data, &cfg).unwrap();
        assert_eq!(stats.images_seen, 6);
        let channels = spec.considered_channels();
        let res = spec.considered_resolutions();
        for l in 0..4 {
            assert_eq!(
                stats.image_mean[l].shape(),
                Shape4::new(1, channels[l], res[l], res[l])
            );
            assert_eq!(
                stats.roi_mean[l].shape(),
                Shape4::new(1, channels[l], spec.roi_size, spec.roi_size)
            );
        }
        // the image-mean reduction must not depend on how the stream was
        // batched
        let big = collect_source_stats(&state, &data, &StatsConfig { batch_size: 6, ..cfg })
            .unwrap();
        for l in 0..4 {
            let d = stats.image_mean[l].max_abs_diff(&big.image_mean[l]);
            assert!(d < 1e-9, "layer {l} image mean drifted {d}");
        }
        for j in 0..stats.global_mean.len() {
            assert!((stats.global_mean[j] - big.global_mean[j]).abs() < 1e-9);
            assert!((stats.global_var[j] - big.global_var[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn weighting_switch_changes_roi_means_only_when_weights_differ() {
        let spec = small_spec();
        let state = NetworkState::init(spec.clone(), 8).unwrap();
        let data = textured_dataset(&spec, 4);
        let weighted = collect_source_stats(
            &state,
            &data,
            &StatsConfig { confidence_weighted: true, ..Default::default() },
        )
        .unwrap();
        let unweighted = collect_source_stats(
            &state,
            &data,
            &StatsConfig { confidence_weighted: false, ..Default::default() },
        )
        .unwrap();
        assert_eq!(weighted.rois_seen, unweighted.rois_seen);
        if weighted.rois_seen > 1 {
            // with an untrained head, confidences vary across RoIs, so the
            // weighted mean must differ somewhere
            let any_differs = (0..4).any(|l| {
                weighted.roi_mean[l].max_abs_diff(&unweighted.roi_mean[l]) > 1e-12
            });
            assert!(any_differs);
        }
        // image-level quantities ignore the switch entirely
        for l in 0..4 {
            assert_eq!(
                weighted.image_mean[l].data(),
                unweighted.image_mean[l].data()
            );
        }
    }

    #[test]
    fn stats_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.dp");
        let spec = small_spec();
        let state = NetworkState::init(spec.clone(), 8).unwrap();
        let data = textured_dataset(&spec, 4);
        let mut stats =
            collect_source_stats(&state, &data, &StatsConfig::default()).unwrap();
        save_source_stats(&path, &stats, &spec).unwrap();
        let loaded = load_source_stats(&path, &spec).unwrap();
        stats.quantize_f32();
        assert_eq!(stats, loaded);
        // a different architecture refuses the file
        let mut other = spec.clone();
        other.classes = 2;
        assert!(matches!(load_source_stats(&path, &other), Err(Error::Archive(_))));
    }

    #[test]
    fn class_usability_threshold() {
        let stats = SourceStats {
            image_mean: vec![],
            roi_mean: vec![],
            global_mean: vec![],
            global_var: vec![],
            class_mean: vec![vec![], vec![]],
            class_var: vec![vec![], vec![]],
            class_count: vec![9, 10],
            images_seen: 0,
            rois_seen: 19,
        };
        assert!(!stats.class_usable(0, 10));
        assert!(stats.class_usable(1, 10));
    }
}
