//! Source-domain training of the full detector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::state::{Proposal, TrainScope};
use super::{iou, GtBox, NetworkSpec, NetworkState, Sample};
use crate::error::Error;
use crate::tensor::{Real, RoiBox, Shape4, Tape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub seed: u64,
    /// Quadratic zone half-width of the box losses.
    pub box_beta: Real,
    /// EMA momentum for running normalization statistics during training.
    pub bn_momentum: Real,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1.5e-3,
            seed: 0,
            box_beta: 0.2,
            bn_momentum: 0.9,
        }
    }
}

/// Anchor box of grid cell (cy, cx).
fn anchor_box(spec: &NetworkSpec, cy: usize, cx: usize) -> (Real, Real, Real, Real) {
    let stride = (spec.image_size / spec.grid()) as Real;
    let a = spec.proposal.anchor_size;
    let ax = (cx as Real + 0.5) * stride;
    let ay = (cy as Real + 0.5) * stride;
    (ax - 0.5 * a, ay - 0.5 * a, ax + 0.5 * a, ay + 0.5 * a)
}

/// Box-delta regression target taking `from` onto `to`, in the shared
/// center/log-size parameterization.
fn delta_targets(from: (Real, Real, Real, Real), to: (Real, Real, Real, Real)) -> [Real; 4] {
    let (fw, fh) = (from.2 - from.0, from.3 - from.1);
    let (tw, th) = (to.2 - to.0, to.3 - to.1);
    let fcx = 0.5 * (from.0 + from.2);
    let fcy = 0.5 * (from.1 + from.3);
    let tcx = 0.5 * (to.0 + to.2);
    let tcy = 0.5 * (to.1 + to.3);
    [(tcx - fcx) / fw, (tcy - fcy) / fh, (tw / fw).ln(), (th / fh).ln()]
}

struct AnchorTargets {
    obj_targets: Vec<Real>,
    obj_weights: Vec<Real>,
    delta_targets: Vec<Real>,
    delta_weights: Vec<Real>,
}

/// Dense proposal-head targets for a batch. Positive anchors are each box's
/// best-overlap anchor plus any anchor above 0.4 IoU; anchors under 0.2 train
/// as background; the band between is ignored. Positives and negatives get
/// equal total weight per image.
fn anchor_targets(spec: &NetworkSpec, batch: &[&Sample]) -> AnchorTargets {
    let g = spec.grid();
    let cells = g * g;
    let n = batch.len();
    let mut t = AnchorTargets {
        obj_targets: vec![0.0; n * cells],
        obj_weights: vec![0.0; n * cells],
        delta_targets: vec![0.0; n * 4 * cells],
        delta_weights: vec![0.0; n * 4 * cells],
    };
    for (bi, sample) in batch.iter().enumerate() {
        let gts: Vec<(Real, Real, Real, Real)> =
            sample.boxes.iter().map(|b| (b.x0, b.y0, b.x1, b.y1)).collect();
        // best IoU per anchor, and the anchor index each box claims
        let mut best_iou = vec![0.0; cells];
        let mut best_gt = vec![usize::MAX; cells];
        let mut forced: Vec<usize> = Vec::new();
        for (gi, &gt) in gts.iter().enumerate() {
            let mut arg = 0usize;
            let mut top = -1.0;
            for cy in 0..g {
                for cx in 0..g {
                    let ci = cy * g + cx;
                    let v = iou(anchor_box(spec, cy, cx), gt);
                    if v > best_iou[ci] {
                        best_iou[ci] = v;
                        best_gt[ci] = gi;
                    }
                    if v > top {
                        top = v;
                        arg = ci;
                    }
                }
            }
            forced.push(arg);
            if best_gt[arg] == usize::MAX {
                best_gt[arg] = gi;
            }
        }
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for ci in 0..cells {
            let is_forced = forced.contains(&ci);
            if is_forced || (best_iou[ci] >= 0.4 && best_gt[ci] != usize::MAX) {
                pos.push(ci);
            } else if best_iou[ci] < 0.2 {
                neg.push(ci);
            }
        }
        let wp = 0.5 / pos.len().max(1) as Real / n as Real;
        let wn = 0.5 / neg.len().max(1) as Real / n as Real;
        for &ci in &neg {
            t.obj_weights[bi * cells + ci] = wn;
        }
        for &ci in &pos {
            t.obj_targets[bi * cells + ci] = 1.0;
            t.obj_weights[bi * cells + ci] = wp;
            let gi = best_gt[ci];
            let gt = gts[gi];
            let (cy, cx) = (ci / g, ci % g);
            let d = delta_targets(anchor_box(spec, cy, cx), gt);
            let wd = 1.0 / (4 * pos.len().max(1)) as Real / n as Real;
            for (k, &dk) in d.iter().enumerate() {
                t.delta_targets[(bi * 4 + k) * cells + ci] = dk;
                t.delta_weights[(bi * 4 + k) * cells + ci] = wd;
            }
        }
    }
    t
}

struct RoiBatch {
    rois: Vec<RoiBox>,
    labels: Vec<usize>,
    label_weights: Vec<Real>,
    box_targets: Vec<Real>,
    box_weights: Vec<Real>,
}

/// Training RoIs: decoded proposals plus the ground-truth boxes themselves,
/// labeled by 0.5-IoU assignment, with background capped at three per
/// foreground (at least eight) so easy negatives don't drown the signal.
fn sample_rois(spec: &NetworkSpec, proposals: &[Vec<Proposal>], batch: &[&Sample]) -> RoiBatch {
    let k_bg = spec.classes;
    struct Cand {
        bx: RoiBox,
        label: usize,
        target: Option<[Real; 4]>,
        score: Real,
    }
    let mut all: Vec<Cand> = Vec::new();
    for (bi, sample) in batch.iter().enumerate() {
        let gts: Vec<&GtBox> = sample.boxes.iter().collect();
        let mut cands: Vec<(RoiBox, Real)> = proposals[bi]
            .iter()
            .map(|p| (RoiBox { batch: bi, x0: p.x0, y0: p.y0, x1: p.x1, y1: p.y1 }, p.score))
            .collect();
        for b in &gts {
            cands.push((RoiBox { batch: bi, x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 }, 2.0));
        }
        let mut fg: Vec<Cand> = Vec::new();
        let mut bg: Vec<Cand> = Vec::new();
        for (bx, score) in cands {
            if bx.is_degenerate() {
                continue;
            }
            let mut best = 0.0;
            let mut arg = None;
            for (gi, b) in gts.iter().enumerate() {
                let v = iou((bx.x0, bx.y0, bx.x1, bx.y1), (b.x0, b.y0, b.x1, b.y1));
                if v > best {
                    best = v;
                    arg = Some(gi);
                }
            }
            if best >= 0.5 {
                let b = gts[arg.unwrap()];
                let target =
                    delta_targets((bx.x0, bx.y0, bx.x1, bx.y1), (b.x0, b.y0, b.x1, b.y1));
                fg.push(Cand { bx, label: b.class, target: Some(target), score });
            } else {
                bg.push(Cand { bx, label: k_bg, target: None, score });
            }
        }
        bg.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let keep_bg = bg.len().min((3 * fg.len()).max(8)).min(32usize.saturating_sub(fg.len()));
        fg.truncate(32);
        bg.truncate(keep_bg);
        all.extend(fg);
        all.extend(bg);
    }
    let total = all.len().max(1);
    let fg_total = all.iter().filter(|c| c.target.is_some()).count().max(1);
    let mut out = RoiBatch {
        rois: Vec::new(),
        labels: Vec::new(),
        label_weights: Vec::new(),
        box_targets: Vec::new(),
        box_weights: Vec::new(),
    };
    for c in all {
        out.rois.push(c.bx);
        out.labels.push(c.label);
        out.label_weights.push(1.0 / total as Real);
        let (t, w) = match c.target {
            Some(t) => (t, 1.0 / (4 * fg_total) as Real),
            None => ([0.0; 4], 0.0),
        };
        out.box_targets.extend_from_slice(&t);
        out.box_weights.extend(std::iter::repeat(w).take(4));
    }
    out
}

fn stack_images(batch: &[&Sample]) -> Tensor4 {
    let s0 = batch[0].image.shape();
    let shape = Shape4::new(batch.len(), s0.c, s0.h, s0.w);
    let mut data = Vec::with_capacity(shape.numel());
    for s in batch {
        data.extend_from_slice(s.image.data());
    }
    Tensor4::from_raw_unchecked(shape, data)
}

/// Per-channel mean and population variance over (n, h, w) of a feature map.
fn channel_moments(x: &Tensor4) -> (Vec<Real>, Vec<Real>) {
    let s = x.shape();
    let denom = (s.n * s.plane()) as Real;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += x.plane(n, c).iter().sum::<Real>();
        }
        mean[c] = acc / denom;
    }
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - mean[c];
                acc += d * d;
            }
        }
        var[c] = acc / denom;
    }
    (mean, var)
}

/// Train every parameter on labeled source data. Returns the trained state
/// and the mean total loss of each epoch. A non-finite loss or non-finite
/// activation statistics abort with the offending step in the error. With
/// zero epochs the freshly initialized state is returned as-is (quantized),
/// its scale snapshot equal to the initial scales.
pub fn pretrain_source(
    spec: NetworkSpec,
    data: &[Sample],
    cfg: &PretrainConfig,
) -> Result<(NetworkState, Vec<Real>), Error> {
    let mut state = NetworkState::init(spec, cfg.seed)?;
    if cfg.epochs == 0 || data.is_empty() {
        state.quantize_f32();
        state.capture_gamma0();
        return Ok((state, Vec::new()));
    }
    let mut adam = crate::optim::Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5045_5452_4149_4e21);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let images = stack_images(&batch);
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let bb = state.backbone(&mut tape, x, None, TrainScope::All);
            let (obj, deltas) = state.proposal_head(&mut tape, bb.stage4, None, TrainScope::All);
            let at = anchor_targets(&state.spec, &batch);
            let obj_loss = tape.sigmoid_bce(obj, &at.obj_targets, &at.obj_weights);
            let pbox_loss = tape.smooth_l1(deltas, &at.delta_targets, &at.delta_weights, cfg.box_beta);
            let mut total = tape.add_scaled(obj_loss, Some(pbox_loss), 1.0, 1.0);
            let props = state.decode_proposals(tape.value(obj), tape.value(deltas));
            let rb = sample_rois(&state.spec, &props, &batch);
            if !rb.rois.is_empty() {
                let (_pooled, cls, bx) =
                    state.roi_head(&mut tape, bb.stage4, &rb.rois, None, TrainScope::All);
                let cls_loss = tape.cross_entropy_rows(cls, &rb.labels, &rb.label_weights);
                let rbox_loss = tape.smooth_l1(bx, &rb.box_targets, &rb.box_weights, cfg.box_beta);
                total = tape.add_scaled(total, Some(cls_loss), 1.0, 1.0);
                total = tape.add_scaled(total, Some(rbox_loss), 1.0, 1.0);
            }
            let loss = tape.scalar(total);
            if !loss.is_finite() {
                return Err(Error::NonFinite { index: step, value: loss });
            }
            // refresh running statistics from this batch's conv outputs
            // before the parameters move
            let moments: Vec<(Vec<Real>, Vec<Real>)> =
                bb.pre_bn.iter().map(|&n| channel_moments(tape.value(n))).collect();
            let grads = tape.backward(total)?;
            adam.step(&mut state, &grads, None);
            for (bn, (mean, var)) in moments.into_iter().enumerate() {
                // overflowing activations surface here first; a network whose
                // statistics have left the finite range is unrecoverable
                if let Some(&bad) = mean.iter().chain(var.iter()).find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { index: step, value: bad });
                }
                let m = cfg.bn_momentum;
                let new_mean: Vec<Real> = state
                    .bn_mean(bn)
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| m * r + (1.0 - m) * b)
                    .collect();
                let new_var: Vec<Real> = state
                    .bn_var(bn)
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (m * r + (1.0 - m) * b).max(1e-8))
                    .collect();
                state.set_bn_stats(bn, new_mean, new_var);
            }
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        curve.push(epoch_loss / batches.max(1) as Real);
    }
    finalize_bn_stats(&mut state, data, cfg.batch_size)?;
    state.quantize_f32();
    state.capture_gamma0();
    Ok((state, curve))
}

/// Replace the running normalization statistics with the exact per-channel
/// mean and variance of the conv outputs over `data`, accumulated in one
/// streaming pass. Variances are floored at 1e-6.
pub fn finalize_bn_stats(
    state: &mut NetworkState,
    data: &[Sample],
    batch_size: usize,
) -> Result<(), Error> {
    if data.is_empty() {
        return Err(Error::Stats("cannot finalize normalization statistics on no data".into()));
    }
    let bn_ch = state.spec.bn_channels();
    // streaming count/mean/M2 per channel, merged batch by batch
    let mut count = vec![0.0; 6];
    let mut mean: Vec<Vec<Real>> = bn_ch.iter().map(|&c| vec![0.0; c]).collect();
    let mut m2: Vec<Vec<Real>> = bn_ch.iter().map(|&c| vec![0.0; c]).collect();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let images = stack_images(&batch);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let bb = state.backbone(&mut tape, x, None, TrainScope::None);
        for (bn, &node) in bb.pre_bn.iter().enumerate() {
            let v = tape.value(node);
            let s = v.shape();
            let b_n = (s.n * s.plane()) as Real;
            let (b_mean, b_var) = channel_moments(v);
            for c in 0..s.c {
                // Chan et al. parallel merge of (count, mean, M2)
                let delta = b_mean[c] - mean[bn][c];
                let tot = count[bn] + b_n;
                mean[bn][c] += delta * b_n / tot;
                m2[bn][c] += b_var[c] * b_n + delta * delta * count[bn] * b_n / tot;
            }
            count[bn] += b_n;
        }
    }
    for bn in 0..6 {
        let var: Vec<Real> = m2[bn].iter().map(|&s| (s / count[bn]).max(1e-6)).collect();
        state.set_bn_stats(bn, mean[bn].clone(), var);
    }
    Ok(())
}
