//! The online update step: align live feature means with the frozen source
//! statistics, penalize scaling factors in proportion to their measured
//! sensitivity, and let Adam move only the scaling factors.
//!
//! Each batch runs one cycle: derive the channel mask from the current scales,
//! run the instrumented forward pass (detections come from the same pass that
//! feeds the losses), score per-channel sensitivity, build the alignment and
//! sparsity losses on the tape, and step. Exponential running means of the
//! target features are updated before the loss is evaluated, but gradient only
//! flows through the current batch's contribution. A batch whose losses or
//! gradients come out non-finite is skipped wholesale: no EMA commit, no
//! frequency-count commit, no optimizer step.

use log::{error, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{select_foreground_rois, Detection, NetworkState, TrainScope};
use crate::error::Error;
use crate::optim::Adam;
use crate::pruning::{
    derive_mask, gated_total_loss, stochastic_reactivation, weighted_sparsity_loss, ChannelMask,
    PruneConfig,
};
use crate::sensitivity::batch_sensitivity;
use crate::stats::SourceStats;
use crate::tensor::{NodeId, OpCounters, ParamGrad, Real, RoiBox, Tape, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Adam step size for the scaling factors.
    pub lr: Real,
    /// Momentum of the running target means; the current batch contributes
    /// `1 - ema_momentum`.
    pub ema_momentum: Real,
    /// Coefficient on the image-level alignment term.
    pub image_weight: Real,
    /// Coefficient on the instance-level alignment term (multiplied per class
    /// by the frequency-balanced class weight).
    pub instance_weight: Real,
    pub prune: PruneConfig,
    /// Classes with fewer source instances than this are excluded from
    /// instance alignment.
    pub min_class_samples: usize,
    /// Source variances below this are clamped up before dividing.
    pub var_floor: Real,
    /// Seed for the reactivation draw stream.
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 0.005,
            ema_momentum: 0.99,
            image_weight: 1.0,
            instance_weight: 1.0,
            prune: PruneConfig::default(),
            min_class_samples: 10,
            var_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Everything the adaptation loop carries between batches. The network itself
/// lives in [`NetworkState`]; this holds the running target means, the class
/// frequency counts, the optimizer moments, and the reactivation draw stream.
pub struct AdaptState {
    /// Running mean of the image-level pooled feature.
    pub ema_global: Vec<Real>,
    /// Running mean of the instance-level pooled feature, per class.
    pub ema_class: Vec<Vec<Real>>,
    /// Confident foreground instances seen per class since adaptation began.
    pub class_seen: Vec<u64>,
    pub momentum: Real,
    pub opt: Adam,
    rng: ChaCha8Rng,
    pub batches_adapted: u64,
    pub batches_skipped: u64,
}

impl AdaptState {
    /// Running means start at the source values, so a target domain identical
    /// to the source yields zero alignment loss from the first batch.
    pub fn new(stats: &SourceStats, cfg: &AdaptConfig) -> AdaptState {
        AdaptState {
            ema_global: stats.global_mean.clone(),
            ema_class: stats.class_mean.clone(),
            class_seen: vec![0; stats.class_mean.len()],
            momentum: cfg.ema_momentum,
            opt: Adam::new(cfg.lr),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5245_4143_5449_5645),
            batches_adapted: 0,
            batches_skipped: 0,
        }
    }
}

/// Inverse-frequency class weights `K·(1/(n_k+1)) / Σ_j 1/(n_j+1)`. They sum
/// to the number of classes, so uniform counts give weight one everywhere and
/// rare classes are amplified at the expense of frequent ones.
pub fn class_weights(counts: &[u64]) -> Vec<Real> {
    let k = counts.len();
    if k == 0 {
        return Vec::new();
    }
    let raw: Vec<Real> = counts.iter().map(|&c| 1.0 / (c as Real + 1.0)).collect();
    let sum: Real = raw.iter().sum();
    raw.iter().map(|&r| k as Real * r / sum).collect()
}

/// Loss values of one batch. `total` always reproduces
/// `image + instance + λ·sparsity` when the penalty was active and
/// `image + instance` when it was not.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub image: Real,
    pub instance: Real,
    pub sparsity: Real,
    pub total: Real,
    /// Pruned-channel fraction of the mask the batch ran under.
    pub ratio: Real,
    /// Whether the sparsity penalty entered the total (ratio below target).
    pub penalty_active: bool,
    /// Frequency-balanced class weights used this batch.
    pub class_weights: Vec<Real>,
}

/// The non-differentiable inputs one batch's loss was built from. Freezing
/// these and re-running [`batch_loss_probe`] makes the objective a smooth
/// function of the scaling factors, which is what a finite-difference check
/// needs.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub mask: ChannelMask,
    /// Per-layer sensitivity weights.
    pub omega: Vec<Vec<Real>>,
    /// RoI boxes in image coordinates.
    pub rois: Vec<RoiBox>,
    /// Indices into `rois` of the confident foreground instances.
    pub picked: Vec<usize>,
    /// Predicted class of each picked instance.
    pub picked_classes: Vec<usize>,
    pub class_weights: Vec<Real>,
}

/// What [`adapt_batch`] hands back to the stream driver.
pub struct BatchOutcome {
    /// Detections from the same forward pass the losses were built on.
    pub detections: Vec<Vec<Detection>>,
    pub report: LossReport,
    /// Mask the forward pass ran under (before any reactivation).
    pub mask: ChannelMask,
    /// Per-channel sensitivity weights the sparsity penalty used, per layer.
    pub omega: Vec<Vec<Real>>,
    /// Channels revived by the reactivation draw, as (layer, channel).
    pub revived: Vec<(usize, usize)>,
    /// Instrumented op counts of the forward pass alone.
    pub forward_counters: OpCounters,
    /// Boxes pooled by the RoI head this batch.
    pub rois: usize,
    /// Confident foreground instances this batch.
    pub picked_foreground: usize,
    /// True when the batch was abandoned because a loss or gradient came out
    /// non-finite; nothing was committed.
    pub skipped: bool,
}

struct BuiltLosses {
    image: NodeId,
    instance: Option<NodeId>,
    sparsity: NodeId,
    total: NodeId,
    updated_global: Vec<Real>,
    updated_class: Vec<(usize, Vec<Real>)>,
}

fn clamped_var(var: &[Real], floor: Real, what: &str) -> Vec<Real> {
    let low = var.iter().filter(|v| **v < floor).count();
    if low > 0 {
        warn!("{low} {what} variance entries below {floor:e}; clamping before division");
    }
    var.iter().map(|&v| v.max(floor)).collect()
}

/// Build the alignment and sparsity losses on an already-populated tape.
/// Returns the loss nodes plus the updated running means, which the caller
/// commits only once the batch is known to be healthy.
fn build_losses(
    tape: &mut Tape,
    stage4: NodeId,
    roi_pooled: Option<NodeId>,
    gamma_nodes: &[NodeId; 4],
    inputs: &LossInputs,
    adapt: &AdaptState,
    stats: &SourceStats,
    cfg: &AdaptConfig,
) -> BuiltLosses {
    let alive4 = inputs.mask.layer(3);
    let pooled = tape.global_channel_mean(stage4, Some(alive4));
    let gvar = clamped_var(&stats.global_var, cfg.var_floor, "image-level");
    let (image, updated_global) = tape.gauss_kl(
        pooled,
        &adapt.ema_global,
        &stats.global_mean,
        &gvar,
        adapt.momentum,
        cfg.image_weight,
    );

    let mut instance = None;
    let mut updated_class = Vec::new();
    if let (Some(rp), false) = (roi_pooled, inputs.picked.is_empty()) {
        let rows = tape.spatial_mean(rp, Some(alive4));
        for class in 0..stats.class_mean.len() {
            let members: Vec<usize> = inputs
                .picked
                .iter()
                .zip(&inputs.picked_classes)
                .filter(|&(_, &c)| c == class)
                .map(|(&i, _)| i)
                .collect();
            if members.is_empty() {
                // classes absent from the batch contribute nothing
                continue;
            }
            if !stats.class_usable(class, cfg.min_class_samples) {
                warn!("class {class} has too few source instances; skipping its alignment term");
                continue;
            }
            let mu = tape.row_select_mean(rows, &members);
            let cvar = clamped_var(&stats.class_var[class], cfg.var_floor, "instance-level");
            let w = cfg.instance_weight * inputs.class_weights[class];
            let (node, upd) = tape.gauss_kl(
                mu,
                &adapt.ema_class[class],
                &stats.class_mean[class],
                &cvar,
                adapt.momentum,
                w,
            );
            updated_class.push((class, upd));
            instance = Some(match instance {
                None => node,
                Some(prev) => tape.add_scaled(prev, Some(node), 1.0, 1.0),
            });
        }
    }

    let alignment = match instance {
        Some(ins) => tape.add_scaled(image, Some(ins), 1.0, 1.0),
        None => image,
    };
    let sparsity = weighted_sparsity_loss(tape, gamma_nodes, &inputs.omega, &inputs.mask);
    let total = gated_total_loss(tape, alignment, sparsity, inputs.mask.ratio(), &cfg.prune);
    BuiltLosses { image, instance, sparsity, total, updated_global, updated_class }
}

fn report_of(tape: &Tape, built: &BuiltLosses, inputs: &LossInputs, cfg: &AdaptConfig) -> LossReport {
    let ratio = inputs.mask.ratio();
    LossReport {
        image: tape.scalar(built.image),
        instance: built.instance.map_or(0.0, |n| tape.scalar(n)),
        sparsity: tape.scalar(built.sparsity),
        total: tape.scalar(built.total),
        ratio,
        penalty_active: ratio < cfg.prune.target_ratio,
        class_weights: inputs.class_weights.clone(),
    }
}

/// Derive the mask, sensitivity, picked instances, and class weights for one
/// batch from a finished forward pass. Counts are staged, not committed: the
/// returned weights already include this batch's instances.
fn stage_inputs(
    state: &NetworkState,
    tape: &Tape,
    out: &crate::detector::ForwardOut,
    mask: ChannelMask,
    adapt: &AdaptState,
    stats: &SourceStats,
) -> (LossInputs, Vec<u64>) {
    let spec = &state.spec;
    let picked = select_foreground_rois(&out.records, spec.background_threshold, spec.max_rois);
    let mut counts = adapt.class_seen.clone();
    for &i in &picked {
        counts[out.records[i].class] += 1;
    }
    let weights = class_weights(&counts);
    let omega: Vec<Vec<Real>> = batch_sensitivity(state, tape, out, stats, &picked)
        .into_iter()
        .map(|l| l.omega)
        .collect();
    let picked_classes = picked.iter().map(|&i| out.records[i].class).collect();
    let inputs = LossInputs {
        mask,
        omega,
        rois: out.rois.clone(),
        picked,
        picked_classes,
        class_weights: weights,
    };
    (inputs, counts)
}

/// One full adaptation cycle on a batch of target images.
///
/// Order of operations: mask from current scales, forward pass, sensitivity,
/// losses, backward, Adam on alive scaling factors, EMA/count commit, and —
/// only when the pruned fraction has reached its target — the reactivation
/// draw. On a non-finite loss or gradient the batch is logged and skipped with
/// every piece of state untouched.
pub fn adapt_batch(
    state: &mut NetworkState,
    adapt: &mut AdaptState,
    stats: &SourceStats,
    images: &Tensor4,
    cfg: &AdaptConfig,
) -> Result<BatchOutcome, Error> {
    let mask = derive_mask(state, cfg.prune.threshold);
    let mut tape = Tape::new();
    let out = state.forward(&mut tape, images, Some(&mask), TrainScope::GammaOnly)?;
    let forward_counters = *tape.counters();

    let rois = out.rois.len();
    let (inputs, counts) = stage_inputs(state, &tape, &out, mask, adapt, stats);
    let built = build_losses(
        &mut tape,
        out.stage4,
        out.roi_pooled,
        &out.considered_gamma,
        &inputs,
        adapt,
        stats,
        cfg,
    );
    let report = report_of(&tape, &built, &inputs, cfg);

    let skipped = |adapt: &mut AdaptState,
                   why: &str,
                   detections: Vec<Vec<Detection>>,
                   report: LossReport,
                   inputs: LossInputs| {
        adapt.batches_skipped += 1;
        error!(
            "skipping batch: {why} (image {}, instance {}, sparsity {})",
            report.image, report.instance, report.sparsity
        );
        BatchOutcome {
            detections,
            report,
            picked_foreground: inputs.picked.len(),
            mask: inputs.mask,
            omega: inputs.omega,
            revived: Vec::new(),
            forward_counters,
            rois,
            skipped: true,
        }
    };

    if !report.total.is_finite() {
        return Ok(skipped(adapt, "non-finite loss", out.detections, report, inputs));
    }
    let grads = tape.backward(built.total)?;
    if grads.values().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        return Ok(skipped(adapt, "non-finite gradient", out.detections, report, inputs));
    }

    adapt.opt.step(state, &grads, Some(&inputs.mask));
    adapt.ema_global = built.updated_global;
    for (class, upd) in built.updated_class {
        adapt.ema_class[class] = upd;
    }
    adapt.class_seen = counts;
    adapt.batches_adapted += 1;

    let mut revived = Vec::new();
    if inputs.mask.ratio() >= cfg.prune.target_ratio && cfg.prune.reactivation_prob > 0.0 {
        let mut post = inputs.mask.clone();
        let rep =
            stochastic_reactivation(state, &mut post, cfg.prune.reactivation_prob, &mut adapt.rng);
        // fresh moments: a revived channel restarts from its pretrained scale
        for &(l, c) in &rep.revived {
            adapt.opt.reset_channel(l, c);
        }
        revived = rep.revived;
    }

    Ok(BatchOutcome {
        detections: out.detections,
        report,
        picked_foreground: inputs.picked.len(),
        mask: inputs.mask,
        omega: inputs.omega,
        revived,
        forward_counters,
        rois,
        skipped: false,
    })
}

/// One batch's losses and gradients without committing anything.
pub struct LossProbe {
    pub report: LossReport,
    pub grads: ParamGrad,
    /// The inputs the losses were built from; feed these back as `fixed` to
    /// evaluate the same objective at perturbed scales.
    pub inputs: LossInputs,
}

/// Evaluate the batch objective read-only. With `fixed = None` the mask,
/// sensitivity, RoIs, and class weights are derived exactly as [`adapt_batch`]
/// would; with a frozen [`LossInputs`] the graph is rebuilt on the given RoI
/// boxes so repeated probes differ only through the scaling factors.
pub fn batch_loss_probe(
    state: &NetworkState,
    adapt: &AdaptState,
    stats: &SourceStats,
    images: &Tensor4,
    cfg: &AdaptConfig,
    fixed: Option<&LossInputs>,
) -> Result<LossProbe, Error> {
    let mut tape = Tape::new();
    let (inputs, stage4, roi_pooled, gamma_nodes) = match fixed {
        None => {
            let mask = derive_mask(state, cfg.prune.threshold);
            let out = state.forward(&mut tape, images, Some(&mask), TrainScope::GammaOnly)?;
            let (inputs, _counts) = stage_inputs(state, &tape, &out, mask, adapt, stats);
            (inputs, out.stage4, out.roi_pooled, out.considered_gamma)
        }
        Some(fi) => {
            let x = tape.constant(images.clone());
            let bb = state.backbone(&mut tape, x, Some(&fi.mask), TrainScope::GammaOnly);
            let pooled = if fi.rois.is_empty() {
                None
            } else {
                let (pooled, _cls, _box) =
                    state.roi_head(&mut tape, bb.stage4, &fi.rois, Some(&fi.mask), TrainScope::GammaOnly);
                Some(pooled)
            };
            (fi.clone(), bb.stage4, pooled, bb.considered_gamma)
        }
    };
    let built =
        build_losses(&mut tape, stage4, roi_pooled, &gamma_nodes, &inputs, adapt, stats, cfg);
    let report = report_of(&tape, &built, &inputs, cfg);
    let grads = tape.backward(built.total)?;
    Ok(LossProbe { report, grads, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{pid, NetworkSpec, Sample, CONSIDERED_BN};
    use crate::stats::{collect_source_stats, StatsConfig};
    use crate::tensor::Shape4;
    use rand::Rng;

    fn small_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::default();
        spec.image_size = 32;
        spec.widths = [4, 6, 8, 8];
        spec.fc_dim = 16;
        spec
    }

    fn random_images(spec: &NetworkSpec, n: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape4::new(n, spec.in_channels, spec.image_size, spec.image_size);
        let data = (0..shape.numel()).map(|_| rng.gen::<Real>()).collect();
        Tensor4::new(shape, data).unwrap()
    }

    fn setup(seed: u64) -> (NetworkState, SourceStats, AdaptConfig) {
        let spec = small_spec();
        let mut state = NetworkState::init(spec, seed).unwrap();
        state.capture_gamma0();
        let source: Vec<Sample> = (0..6)
            .map(|i| Sample {
                image: random_images(&state.spec, 1, 1000 + i),
                boxes: Vec::new(),
            })
            .collect();
        let cfg = StatsConfig { min_class_samples: 0, ..StatsConfig::default() };
        let stats = collect_source_stats(&state, &source, &cfg).unwrap();
        let adapt_cfg = AdaptConfig { min_class_samples: 0, ..AdaptConfig::default() };
        (state, stats, adapt_cfg)
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[5, 5, 5]);
        for &x in &w {
            assert!((x - 1.0).abs() < 1e-12);
        }
        // counts (1, 3): raw (1/2, 1/4) → weights (4/3, 2/3)
        let w = class_weights(&[1, 3]);
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.iter().sum::<Real>() - 2.0).abs() < 1e-12);
        // more frequent never means more weight
        let w = class_weights(&[0, 2, 7, 7]);
        assert!(w[0] > w[1] && w[1] > w[2]);
        assert!((w[2] - w[3]).abs() < 1e-15);
    }

    #[test]
    fn single_class_instance_term_hand_value() {
        // one usable class: its weight is exactly 1, and with the running mean
        // already at the batch mean the blend is a no-op, so the term is
        // ½·(2-0)²/1 = 2
        let w = class_weights(&[17]);
        assert_eq!(w, vec![1.0]);
        let mut tape = Tape::new();
        let mu = tape.param(0, Tensor4::new(Shape4::vector(1), vec![2.0]).unwrap());
        let (node, _upd) = tape.gauss_kl(mu, &[2.0], &[0.0], &[1.0], 0.99, w[0]);
        assert!((tape.scalar(node) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_reproduces_total_from_parts() {
        let (mut state, stats, cfg) = setup(3);
        let mut adapt = AdaptState::new(&stats, &cfg);
        let images = random_images(&state.spec, 2, 77);
        let out = adapt_batch(&mut state, &mut adapt, &stats, &images, &cfg).unwrap();
        assert!(!out.skipped);
        let r = &out.report;
        let expect = if r.penalty_active {
            r.image + r.instance + cfg.prune.lambda * r.sparsity
        } else {
            r.image + r.instance
        };
        assert!((r.total - expect).abs() < 1e-12);
        assert_eq!(r.class_weights.len(), state.spec.classes);
    }

    #[test]
    fn matching_statistics_leave_only_the_sparsity_gradient() {
        // make the target indistinguishable from the source for this batch:
        // the running mean holds the exact batch mean and the frozen source
        // mean holds the exact post-blend value, so both alignment terms are
        // identically zero and the only force on the scales is the weighted
        // magnitude penalty
        let (state, stats, cfg) = setup(4);
        let images = random_images(&state.spec, 2, 901);
        let mut tape = Tape::new();
        let out = state.forward(&mut tape, &images, None, TrainScope::None).unwrap();
        // replicate the blend arithmetic bit for bit
        let blend = |x: Real| cfg.ema_momentum * x + (1.0 - cfg.ema_momentum) * x;
        let pooled = tape.global_channel_mean(out.stage4, None);
        let batch_global = tape.value(pooled).data().to_vec();
        let mut aligned = stats.clone();
        aligned.global_mean = batch_global.iter().map(|&x| blend(x)).collect();
        let picked = select_foreground_rois(
            &out.records,
            state.spec.background_threshold,
            state.spec.max_rois,
        );
        let mut batch_class = stats.class_mean.clone();
        if let Some(rp) = out.roi_pooled {
            let rows = tape.spatial_mean(rp, None);
            for class in 0..state.spec.classes {
                let members: Vec<usize> = picked
                    .iter()
                    .copied()
                    .filter(|&i| out.records[i].class == class)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mu = tape.row_select_mean(rows, &members);
                batch_class[class] = tape.value(mu).data().to_vec();
                aligned.class_mean[class] =
                    batch_class[class].iter().map(|&x| blend(x)).collect();
            }
        }
        let mut adapt = AdaptState::new(&aligned, &cfg);
        adapt.ema_global = batch_global;
        adapt.ema_class = batch_class;
        let probe = batch_loss_probe(&state, &adapt, &aligned, &images, &cfg, None).unwrap();
        assert_eq!(probe.report.image, 0.0);
        assert_eq!(probe.report.instance, 0.0);
        assert!(probe.report.sparsity > 0.0);
        // every scale gradient collapses to λ·ω·sign(scale) on alive channels
        for (l, &bn) in CONSIDERED_BN.iter().enumerate() {
            let id = pid::BN_GAMMA[bn];
            let g = probe.grads.get(&id).expect("scale gradient present");
            for (c, (&gv, &gamma)) in
                g.data().iter().zip(state.considered_gamma(l)).enumerate()
            {
                let expect = cfg.prune.lambda * probe.inputs.omega[l][c] * gamma.signum();
                assert!(
                    (gv - expect).abs() < 1e-12,
                    "layer {l} channel {c}: gradient {gv} vs sparsity-only {expect}"
                );
            }
        }
    }

    #[test]
    fn absent_class_statistics_are_irrelevant() {
        let (state, stats, cfg) = setup(5);
        let adapt = AdaptState::new(&stats, &cfg);
        let images = random_images(&state.spec, 2, 41);
        let base = batch_loss_probe(&state, &adapt, &stats, &images, &cfg, None).unwrap();
        let mut inputs = base.inputs.clone();
        assert!(!inputs.picked.is_empty(), "expected confident foreground instances");
        // force every picked instance to class 0, leaving the others absent
        for c in inputs.picked_classes.iter_mut() {
            *c = 0;
        }
        let a = batch_loss_probe(&state, &adapt, &stats, &images, &cfg, Some(&inputs)).unwrap();
        let mut warped = stats.clone();
        for v in warped.class_mean[1].iter_mut() {
            *v += 1000.0;
        }
        for v in warped.class_mean[2].iter_mut() {
            *v += -500.0;
        }
        let adapt_w = AdaptState::new(&warped, &cfg);
        let b = batch_loss_probe(&state, &adapt_w, &warped, &images, &cfg, Some(&inputs)).unwrap();
        assert_eq!(a.report.total, b.report.total);
        assert_eq!(a.report.instance, b.report.instance);
    }

    #[test]
    fn unpruned_zero_penalty_run_matches_plain_alignment() {
        // with threshold 0 nothing is pruned, with λ = 0 the penalty carries
        // no weight, and with reactivation off the draw stream is idle — the
        // scale trajectory must match a hand-rolled alignment-only loop
        let (state0, stats, _) = setup(6);
        let cfg = AdaptConfig {
            min_class_samples: 0,
            prune: PruneConfig {
                threshold: 0.0,
                lambda: 0.0,
                reactivation_prob: 0.0,
                ..PruneConfig::default()
            },
            ..AdaptConfig::default()
        };
        let batches: Vec<Tensor4> =
            (0..2).map(|i| random_images(&state0.spec, 2, 600 + i)).collect();

        let mut state_a = state0.clone();
        let mut adapt = AdaptState::new(&stats, &cfg);
        for images in &batches {
            let out = adapt_batch(&mut state_a, &mut adapt, &stats, images, &cfg).unwrap();
            assert!(!out.skipped);
            assert!((out.report.ratio).abs() < 1e-15);
        }

        // independent reimplementation without any pruning machinery
        let mut state_b = state0.clone();
        let mut ema_global = stats.global_mean.clone();
        let mut ema_class = stats.class_mean.clone();
        let mut seen = vec![0u64; state_b.spec.classes];
        let mut opt = Adam::new(cfg.lr);
        for images in &batches {
            let mut tape = Tape::new();
            let out = state_b.forward(&mut tape, images, None, TrainScope::GammaOnly).unwrap();
            let picked = select_foreground_rois(
                &out.records,
                state_b.spec.background_threshold,
                state_b.spec.max_rois,
            );
            for &i in &picked {
                seen[out.records[i].class] += 1;
            }
            let weights = class_weights(&seen);
            let pooled = tape.global_channel_mean(out.stage4, None);
            let gvar = clamped_var(&stats.global_var, cfg.var_floor, "t");
            let (mut loss, upd_g) = tape.gauss_kl(
                pooled,
                &ema_global,
                &stats.global_mean,
                &gvar,
                cfg.ema_momentum,
                cfg.image_weight,
            );
            let mut upd_c = Vec::new();
            if let Some(rp) = out.roi_pooled {
                let rows = tape.spatial_mean(rp, None);
                for class in 0..state_b.spec.classes {
                    let members: Vec<usize> = picked
                        .iter()
                        .copied()
                        .filter(|&i| out.records[i].class == class)
                        .collect();
                    if members.is_empty() {
                        continue;
                    }
                    let mu = tape.row_select_mean(rows, &members);
                    let cvar = clamped_var(&stats.class_var[class], cfg.var_floor, "t");
                    let (node, upd) = tape.gauss_kl(
                        mu,
                        &ema_class[class],
                        &stats.class_mean[class],
                        &cvar,
                        cfg.ema_momentum,
                        cfg.instance_weight * weights[class],
                    );
                    upd_c.push((class, upd));
                    loss = tape.add_scaled(loss, Some(node), 1.0, 1.0);
                }
            }
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut state_b, &grads, None);
            ema_global = upd_g;
            for (class, upd) in upd_c {
                ema_class[class] = upd;
            }
        }

        for l in 0..CONSIDERED_BN.len() {
            assert_eq!(state_a.considered_gamma(l), state_b.considered_gamma(l));
        }
        assert_eq!(adapt.ema_global, ema_global);
        assert_eq!(adapt.ema_class, ema_class);
    }

    #[test]
    fn repeated_runs_are_deterministic() {
        let (state0, stats, cfg) = setup(7);
        let batches: Vec<Tensor4> =
            (0..2).map(|i| random_images(&state0.spec, 2, 300 + i)).collect();
        let run = || {
            let mut state = state0.clone();
            let mut adapt = AdaptState::new(&stats, &cfg);
            let mut reports = Vec::new();
            for images in &batches {
                let out = adapt_batch(&mut state, &mut adapt, &stats, images, &cfg).unwrap();
                reports.push((out.report.total, out.report.image, out.report.instance));
            }
            (reports, state)
        };
        let (ra, sa) = run();
        let (rb, sb) = run();
        assert_eq!(ra, rb);
        for l in 0..CONSIDERED_BN.len() {
            assert_eq!(sa.considered_gamma(l), sb.considered_gamma(l));
        }
    }

    #[test]
    fn only_scaling_factors_move() {
        let (mut state, stats, cfg) = setup(8);
        let before = state.clone();
        let mut adapt = AdaptState::new(&stats, &cfg);
        for i in 0..3 {
            let images = random_images(&state.spec, 2, 500 + i);
            adapt_batch(&mut state, &mut adapt, &stats, &images, &cfg).unwrap();
        }
        assert!(adapt.batches_adapted == 3);
        let considered: Vec<u32> =
            CONSIDERED_BN.iter().map(|&bn| pid::BN_GAMMA[bn]).collect();
        let mut moved = 0;
        for id in 0..pid::COUNT as u32 {
            if considered.contains(&id) {
                if state.param(id).data() != before.param(id).data() {
                    moved += 1;
                }
            } else {
                assert_eq!(
                    state.param(id).data(),
                    before.param(id).data(),
                    "parameter {id} is outside the adaptation scope but changed"
                );
            }
        }
        assert!(moved > 0, "no scaling factor moved at all");
        for bn in 0..6 {
            assert_eq!(state.bn_mean(bn), before.bn_mean(bn));
            assert_eq!(state.bn_var(bn), before.bn_var(bn));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut state, stats, mut cfg) = setup(9);
        // make both loss branches genuinely active: prune a little but stay
        // under target so the penalty stays in the total
        cfg.prune.threshold = 0.02;
        let images = random_images(&state.spec, 2, 222);
        let adapt = AdaptState::new(&stats, &cfg);
        let probe = batch_loss_probe(&state, &adapt, &stats, &images, &cfg, None).unwrap();
        let inputs = probe.inputs.clone();
        let h = 1e-5;
        let mut checked = 0;
        for (l, &bn) in CONSIDERED_BN.iter().enumerate() {
            let id = pid::BN_GAMMA[bn];
            let channels = state.considered_gamma(l).len();
            for c in (0..channels).step_by(3) {
                let orig = state.param(id).data()[c];
                if orig.abs() < cfg.prune.threshold {
                    continue; // pruned channels carry no gradient by design
                }
                state.param_mut(id).data_mut()[c] = orig + h;
                let up = batch_loss_probe(&state, &adapt, &stats, &images, &cfg, Some(&inputs))
                    .unwrap()
                    .report
                    .total;
                state.param_mut(id).data_mut()[c] = orig - h;
                let dn = batch_loss_probe(&state, &adapt, &stats, &images, &cfg, Some(&inputs))
                    .unwrap()
                    .report
                    .total;
                state.param_mut(id).data_mut()[c] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = probe.grads.get(&id).map_or(0.0, |g| g.data()[c]);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "layer {l} channel {c}: finite difference {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 8, "too few channels exercised ({checked})");
    }

    #[test]
    fn running_means_close_geometrically() {
        let (mut state, stats, mut cfg) = setup(10);
        cfg.lr = 0.0; // freeze the network so the batch mean is a fixed point
        cfg.prune.threshold = 0.0;
        cfg.prune.reactivation_prob = 0.0;
        let mut adapt = AdaptState::new(&stats, &cfg);
        let images = random_images(&state.spec, 2, 888);
        let mut snapshots = vec![adapt.ema_global.clone()];
        for _ in 0..3 {
            adapt_batch(&mut state, &mut adapt, &stats, &images, &cfg).unwrap();
            snapshots.push(adapt.ema_global.clone());
        }
        // successive increments shrink by exactly the momentum factor
        for c in 0..snapshots[0].len() {
            let d1 = snapshots[1][c] - snapshots[0][c];
            let d2 = snapshots[2][c] - snapshots[1][c];
            let d3 = snapshots[3][c] - snapshots[2][c];
            if d1.abs() < 1e-12 {
                continue;
            }
            assert!((d2 / d1 - cfg.ema_momentum).abs() < 1e-9);
            assert!((d3 / d2 - cfg.ema_momentum).abs() < 1e-9);
        }
    }

    #[test]
    fn poisoned_batch_is_skipped_without_side_effects() {
        let (mut state, stats, cfg) = setup(11);
        let mut adapt = AdaptState::new(&stats, &cfg);
        let before_params = state.clone();
        let before_ema = adapt.ema_global.clone();
        let spec_n = state.spec.in_channels * state.spec.image_size * state.spec.image_size;
        let shape = Shape4::new(1, state.spec.in_channels, state.spec.image_size, state.spec.image_size);
        let images = Tensor4::new(shape, vec![1e306; spec_n]).unwrap();
        let out = adapt_batch(&mut state, &mut adapt, &stats, &images, &cfg).unwrap();
        assert!(out.skipped);
        assert!(!out.report.total.is_finite());
        assert_eq!(adapt.batches_skipped, 1);
        assert_eq!(adapt.batches_adapted, 0);
        assert_eq!(adapt.ema_global, before_ema);
        assert_eq!(adapt.class_seen, vec![0; state.spec.classes]);
        for id in 0..pid::COUNT as u32 {
            assert_eq!(state.param(id).data(), before_params.param(id).data());
        }
        assert_eq!(adapt.opt.steps_taken(), 0);
    }
}
