//! Parameters, initialization, and the instrumented forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nms, Detection, NetworkSpec, BN_NAMES, CONSIDERED_BN};
use crate::error::Error;
use crate::pruning::ChannelMask;
use crate::tensor::{NodeId, Real, RoiBox, Shape4, Tape, Tensor4};

/// Parameter-id registry. Ids are dense and stable, so optimizer state and
/// archives can be keyed by them.
pub mod pid {
    /// conv1, conv2, conv3a, conv3b, conv3d, conv4 kernel tensors.
    pub const CONV_W: [u32; 6] = [0, 3, 6, 9, 12, 15];
    /// Normalization scales, in bn-table order.
    pub const BN_GAMMA: [u32; 6] = [1, 4, 7, 10, 13, 16];
    /// Normalization shifts, in bn-table order.
    pub const BN_BETA: [u32; 6] = [2, 5, 8, 11, 14, 17];
    pub const PROP_W: u32 = 18;
    pub const PROP_B: u32 = 19;
    pub const FC1_W: u32 = 20;
    pub const FC1_B: u32 = 21;
    pub const FC_CLS_W: u32 = 22;
    pub const FC_CLS_B: u32 = 23;
    pub const FC_BOX_W: u32 = 24;
    pub const FC_BOX_B: u32 = 25;
    pub const COUNT: usize = 26;
}

/// Which parameters register as trainable leaves when building a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Everything is a constant; the tape is evaluation-only.
    None,
    /// Only the scales of the four considered normalization layers train.
    GammaOnly,
    /// Every parameter trains (source pretraining).
    All,
}

/// All learnable state plus normalization running statistics.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    params: Vec<Tensor4>,
    bn_mean: Vec<Vec<Real>>,
    bn_var: Vec<Vec<Real>>,
    /// Pretrained scales of the considered layers, the values reactivation
    /// restores. Captured when pretraining finishes.
    gamma0: Vec<Vec<Real>>,
}

/// One decoded proposal in image pixels.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub x0: Real,
    pub y0: Real,
    pub x1: Real,
    pub y1: Real,
    pub score: Real,
    /// (row, col) of the grid cell that produced it.
    pub cell: (usize, usize),
}

/// Book-keeping for one pooled RoI.
#[derive(Debug, Clone)]
pub struct RoiRecord {
    /// Batch index of the image the RoI came from.
    pub image: usize,
    /// Proposal box in image pixels — the region that was pooled.
    pub x0: Real,
    pub y0: Real,
    pub x1: Real,
    pub y1: Real,
    /// Class probabilities over K classes plus background (last).
    pub probs: Vec<Real>,
    /// Argmax over the K foreground classes.
    pub class: usize,
    /// 1 − background probability.
    pub fg_confidence: Real,
}

impl RoiRecord {
    pub fn background(&self) -> Real {
        *self.probs.last().unwrap()
    }
}

/// Everything a forward pass leaves behind: tape nodes for the differentiable
/// pieces, plain values for the decoded ones.
pub struct ForwardOut {
    /// Final backbone map after normalization and ReLU, (N, C4, g, g).
    pub stage4: NodeId,
    /// Convolution outputs entering each of the six normalization layers.
    pub pre_bn: [NodeId; 6],
    /// Objectness logits (N, 1, g, g).
    pub prop_obj: NodeId,
    /// Box deltas (N, 4, g, g).
    pub prop_deltas: NodeId,
    /// Post-NMS proposals per image.
    pub proposals: Vec<Vec<Proposal>>,
    /// The boxes actually pooled, flat across the batch.
    pub rois: Vec<RoiBox>,
    /// RoI-head class logits (M, K+1); absent when no proposal survived.
    pub roi_cls: Option<NodeId>,
    /// RoI-head refinement deltas (M, 4).
    pub roi_box: Option<NodeId>,
    /// Pooled RoI features (M, C4, r, r), input to the head.
    pub roi_pooled: Option<NodeId>,
    /// One record per pooled RoI, index-aligned with `rois`.
    pub records: Vec<RoiRecord>,
    /// Final detections per image.
    pub detections: Vec<Vec<Detection>>,
    /// Tape leaves for the scaling factors of the prunable layers, in
    /// considered order; lets callers attach penalties to the same nodes the
    /// forward pass used.
    pub considered_gamma: [NodeId; 4],
}

pub(crate) struct Backbone {
    pub stage4: NodeId,
    pub pre_bn: [NodeId; 6],
    pub considered_gamma: [NodeId; 4],
}

fn he_uniform<R: Rng>(rng: &mut R, shape: Shape4, fan_in: usize) -> Tensor4 {
    let bound = (6.0 / fan_in as Real).sqrt();
    let data = (0..shape.numel()).map(|_| (2.0 * rng.gen::<Real>() - 1.0) * bound).collect();
    Tensor4::new(shape, data).unwrap()
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row(row: &[Real]) -> Vec<Real> {
    let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: Real = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

impl NetworkState {
    /// Fresh state with seeded weights, unit scales, zero shifts, and
    /// unit-variance running statistics. The same seed gives bit-identical
    /// state.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<NetworkState, Error> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2, w3, w4] = spec.widths;
        let conv_shapes = [
            (w1, spec.in_channels, 3),
            (w2, w1, 3),
            (w3, w2, 3),
            (w3, w3, 3),
            (w3, w2, 1),
            (w4, w3, 3),
        ];
        let bn_ch = spec.bn_channels();
        let mut params = vec![Tensor4::scalar_value(0.0); pid::COUNT];
        for (i, &(co, ci, k)) in conv_shapes.iter().enumerate() {
            params[pid::CONV_W[i] as usize] =
                he_uniform(&mut rng, Shape4::new(co, ci, k, k), ci * k * k);
            params[pid::BN_GAMMA[i] as usize] =
                Tensor4::new(Shape4::vector(bn_ch[i]), vec![1.0; bn_ch[i]]).unwrap();
            params[pid::BN_BETA[i] as usize] = Tensor4::zeros(Shape4::vector(bn_ch[i]));
        }
        params[pid::PROP_W as usize] = he_uniform(&mut rng, Shape4::new(5, w4, 3, 3), w4 * 9);
        // bias the objectness channel low so early training sees a sane
        // background prior; deltas start unbiased
        let mut prop_b = vec![0.0; 5];
        prop_b[0] = -2.0;
        params[pid::PROP_B as usize] = Tensor4::new(Shape4::vector(5), prop_b).unwrap();
        let flat = spec.roi_flat_dim();
        params[pid::FC1_W as usize] =
            he_uniform(&mut rng, Shape4::rows(spec.fc_dim, flat), flat);
        params[pid::FC1_B as usize] = Tensor4::zeros(Shape4::vector(spec.fc_dim));
        let kp = spec.classes + 1;
        params[pid::FC_CLS_W as usize] =
            he_uniform(&mut rng, Shape4::rows(kp, spec.fc_dim), spec.fc_dim);
        params[pid::FC_CLS_B as usize] = Tensor4::zeros(Shape4::vector(kp));
        params[pid::FC_BOX_W as usize] =
            he_uniform(&mut rng, Shape4::rows(4, spec.fc_dim), spec.fc_dim);
        params[pid::FC_BOX_B as usize] = Tensor4::zeros(Shape4::vector(4));
        let bn_mean = bn_ch.iter().map(|&c| vec![0.0; c]).collect();
        let bn_var = bn_ch.iter().map(|&c| vec![1.0; c]).collect();
        let gamma0 = CONSIDERED_BN.iter().map(|&i| vec![1.0; bn_ch[i]]).collect();
        Ok(NetworkState { spec, params, bn_mean, bn_var, gamma0 })
    }

    pub fn param(&self, id: u32) -> &Tensor4 {
        &self.params[id as usize]
    }

    pub fn param_mut(&mut self, id: u32) -> &mut Tensor4 {
        &mut self.params[id as usize]
    }

    pub fn set_param(&mut self, id: u32, value: Tensor4) {
        assert_eq!(value.shape(), self.params[id as usize].shape(), "param {id} shape");
        self.params[id as usize] = value;
    }

    pub fn bn_mean(&self, bn: usize) -> &[Real] {
        &self.bn_mean[bn]
    }

    pub fn bn_var(&self, bn: usize) -> &[Real] {
        &self.bn_var[bn]
    }

    pub fn set_bn_stats(&mut self, bn: usize, mean: Vec<Real>, var: Vec<Real>) {
        assert_eq!(mean.len(), self.bn_mean[bn].len());
        assert_eq!(var.len(), self.bn_var[bn].len());
        assert!(var.iter().all(|&v| v > 0.0), "{} variance must be positive", BN_NAMES[bn]);
        self.bn_mean[bn] = mean;
        self.bn_var[bn] = var;
    }

    /// Scale vector of considered layer `l` (index into [`CONSIDERED_BN`]).
    pub fn considered_gamma(&self, l: usize) -> &[Real] {
        self.params[pid::BN_GAMMA[CONSIDERED_BN[l]] as usize].data()
    }

    pub fn considered_gamma_mut(&mut self, l: usize) -> &mut [Real] {
        self.params[pid::BN_GAMMA[CONSIDERED_BN[l]] as usize].data_mut()
    }

    /// Pretrained scale snapshot for considered layer `l`.
    pub fn gamma0(&self, l: usize) -> &[Real] {
        &self.gamma0[l]
    }

    /// Record current considered scales as the pretrained snapshot.
    pub fn capture_gamma0(&mut self) {
        self.gamma0 = (0..CONSIDERED_BN.len()).map(|l| self.considered_gamma(l).to_vec()).collect();
    }

    /// Install a previously saved scale snapshot (checkpoint loading).
    pub fn restore_gamma0(&mut self, gamma0: Vec<Vec<Real>>) -> Result<(), Error> {
        let expect: Vec<usize> = self.spec.considered_channels();
        let got: Vec<usize> = gamma0.iter().map(Vec::len).collect();
        if got != expect {
            return Err(Error::Shape(format!(
                "scale snapshot lengths {got:?} do not match considered channels {expect:?}"
            )));
        }
        self.gamma0 = gamma0;
        Ok(())
    }

    /// Pass every parameter and statistic through 32-bit precision, so that
    /// in-memory state and an archive round trip agree bit for bit.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            *p = p.quantized_f32();
        }
        let q = |v: &mut Vec<Real>| {
            for x in v.iter_mut() {
                *x = *x as f32 as Real;
            }
        };
        self.bn_mean.iter_mut().for_each(&q);
        self.bn_var.iter_mut().for_each(&q);
        self.gamma0.iter_mut().for_each(&q);
    }

    /// Parameter ids that train under `scope`, ascending.
    pub fn trainable_ids(&self, scope: TrainScope) -> Vec<u32> {
        match scope {
            TrainScope::None => Vec::new(),
            TrainScope::GammaOnly => {
                let mut ids: Vec<u32> =
                    CONSIDERED_BN.iter().map(|&b| pid::BN_GAMMA[b]).collect();
                ids.sort_unstable();
                ids
            }
            TrainScope::All => (0..pid::COUNT as u32).collect(),
        }
    }

    fn leaf(&self, tape: &mut Tape, id: u32, scope: TrainScope, trains: bool) -> NodeId {
        let value = self.params[id as usize].clone();
        let is_param = match scope {
            TrainScope::None => false,
            TrainScope::All => true,
            TrainScope::GammaOnly => trains,
        };
        if is_param {
            tape.param(id, value)
        } else {
            tape.constant(value)
        }
    }

    pub(crate) fn backbone(
        &self,
        tape: &mut Tape,
        images: NodeId,
        mask: Option<&ChannelMask>,
        scope: TrainScope,
    ) -> Backbone {
        let spec = &self.spec;
        let eps = spec.bn_eps;
        let alive = |l: usize| mask.map(|m| m.layer(l));
        // which bn-table entries are considered, for gamma-only training
        let considered = |bn: usize| CONSIDERED_BN.contains(&bn);
        let w = |tape: &mut Tape, i: usize| self.leaf(tape, pid::CONV_W[i], scope, false);
        let mut bn_in = [0usize; 6];
        let mut gamma_nodes = [0usize; 6];
        let mut run_bn = |tape: &mut Tape, x: NodeId, bn: usize, al: Option<&[bool]>| {
            bn_in[bn] = x;
            let g = self.leaf(tape, pid::BN_GAMMA[bn], scope, considered(bn));
            gamma_nodes[bn] = g;
            let b = self.leaf(tape, pid::BN_BETA[bn], scope, false);
            tape.bn(x, g, b, &self.bn_mean[bn], &self.bn_var[bn], eps, al)
        };

        let w1 = w(tape, 0);
        let c1 = tape.conv(images, w1, None, 1, 1, None, alive(0));
        let n1 = run_bn(tape, c1, 0, alive(0));
        let r1 = tape.relu(n1, alive(0));
        let p1 = tape.maxpool(r1, 2, alive(0));

        let w2 = w(tape, 1);
        let c2 = tape.conv(p1, w2, None, 1, 1, alive(0), alive(1));
        let n2 = run_bn(tape, c2, 1, alive(1));
        let r2 = tape.relu(n2, alive(1));

        // residual block: main branch down-samples with conv3a/conv3b, the
        // 1x1 shortcut conv3d matches shapes; neither branch is masked on the
        // input side, and only bn3b participates in pruning
        let w3a = w(tape, 2);
        let c3a = tape.conv(r2, w3a, None, 2, 1, None, None);
        let n3a = run_bn(tape, c3a, 2, None);
        let r3a = tape.relu(n3a, None);
        let w3b = w(tape, 3);
        let c3b = tape.conv(r3a, w3b, None, 1, 1, None, alive(2));
        let n3b = run_bn(tape, c3b, 3, alive(2));
        let w3d = w(tape, 4);
        let c3d = tape.conv(r2, w3d, None, 2, 0, None, None);
        let n3d = run_bn(tape, c3d, 4, None);
        let a3 = tape.add(n3b, n3d);
        let r3 = tape.relu(a3, None);

        let w4 = w(tape, 5);
        let c4 = tape.conv(r3, w4, None, 2, 1, None, alive(3));
        let n4 = run_bn(tape, c4, 5, alive(3));
        let r4 = tape.relu(n4, alive(3));

        let mut considered_gamma = [0usize; 4];
        for (slot, &bn) in CONSIDERED_BN.iter().enumerate() {
            considered_gamma[slot] = gamma_nodes[bn];
        }
        Backbone { stage4: r4, pre_bn: bn_in, considered_gamma }
    }

    pub(crate) fn proposal_head(
        &self,
        tape: &mut Tape,
        stage4: NodeId,
        mask: Option<&ChannelMask>,
        scope: TrainScope,
    ) -> (NodeId, NodeId) {
        let wp = self.leaf(tape, pid::PROP_W, scope, false);
        let bp = self.leaf(tape, pid::PROP_B, scope, false);
        let out = tape.conv(stage4, wp, Some(bp), 1, 1, mask.map(|m| m.layer(3)), None);
        let obj = tape.channel_slice(out, 0, 1);
        let deltas = tape.channel_slice(out, 1, 5);
        (obj, deltas)
    }

    /// Decode the dense proposal map into per-image boxes: sigmoid the
    /// objectness logits, apply deltas to the cell anchor, clamp to the
    /// image, drop slivers, NMS, keep the top K. Box coordinates are treated
    /// as data from here on; gradients reach the proposal head only through
    /// its own training losses.
    pub fn decode_proposals(&self, obj: &Tensor4, deltas: &Tensor4) -> Vec<Vec<Proposal>> {
        let spec = &self.spec;
        let g = spec.grid();
        let stride = (spec.image_size / g) as Real;
        let a = spec.proposal.anchor_size;
        let s = spec.image_size as Real;
        let n_imgs = obj.shape().n;
        let mut out = Vec::with_capacity(n_imgs);
        for n in 0..n_imgs {
            let mut cand: Vec<Proposal> = Vec::new();
            for cy in 0..g {
                for cx in 0..g {
                    let z = obj.at(n, 0, cy, cx);
                    let score = 1.0 / (1.0 + (-z).exp());
                    let t = [
                        deltas.at(n, 0, cy, cx),
                        deltas.at(n, 1, cy, cx),
                        deltas.at(n, 2, cy, cx),
                        deltas.at(n, 3, cy, cx),
                    ];
                    let ax = (cx as Real + 0.5) * stride;
                    let ay = (cy as Real + 0.5) * stride;
                    let bx = ax + t[0] * a;
                    let by = ay + t[1] * a;
                    let bw = a * t[2].clamp(-3.0, 3.0).exp();
                    let bh = a * t[3].clamp(-3.0, 3.0).exp();
                    let x0 = (bx - 0.5 * bw).clamp(0.0, s);
                    let y0 = (by - 0.5 * bh).clamp(0.0, s);
                    let x1 = (bx + 0.5 * bw).clamp(0.0, s);
                    let y1 = (by + 0.5 * bh).clamp(0.0, s);
                    // a numerically broken map must not crash the decode; the
                    // training loops detect the non-finite loss separately
                    if ![score, x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
                        continue;
                    }
                    if x1 - x0 < spec.proposal.min_size || y1 - y0 < spec.proposal.min_size {
                        continue;
                    }
                    cand.push(Proposal { x0, y0, x1, y1, score, cell: (cy, cx) });
                }
            }
            let boxes: Vec<_> = cand.iter().map(|p| (p.x0, p.y0, p.x1, p.y1)).collect();
            let scores: Vec<_> = cand.iter().map(|p| p.score).collect();
            let mut kept = nms(&boxes, &scores, spec.proposal.nms_iou);
            kept.truncate(spec.proposal.top_k);
            out.push(kept.into_iter().map(|i| cand[i]).collect());
        }
        out
    }

    /// Pool `rois` (image pixels) from the final map and run the RoI head.
    /// Returns (pooled features, class logits, box deltas).
    pub(crate) fn roi_head(
        &self,
        tape: &mut Tape,
        stage4: NodeId,
        rois: &[RoiBox],
        mask: Option<&ChannelMask>,
        scope: TrainScope,
    ) -> (NodeId, NodeId, NodeId) {
        let spec = &self.spec;
        let stride = spec.image_size / spec.grid();
        let scaled: Vec<RoiBox> = rois.iter().map(|r| r.scaled(1.0 / stride as Real)).collect();
        let alive4 = mask.map(|m| m.layer(3));
        let pooled = tape.roi_align(stage4, &scaled, (spec.roi_size, spec.roi_size), alive4);
        let m = rois.len();
        let flat = tape.reshape(pooled, Shape4::rows(m, spec.roi_flat_dim()));
        // flattening is channel-major, so the alive pattern expands blockwise
        let fc_alive: Option<Vec<bool>> = mask.map(|mk| {
            let per = spec.roi_size * spec.roi_size;
            mk.layer(3).iter().flat_map(|&a| std::iter::repeat(a).take(per)).collect()
        });
        let w1 = self.leaf(tape, pid::FC1_W, scope, false);
        let b1 = self.leaf(tape, pid::FC1_B, scope, false);
        let h = tape.fc(flat, w1, Some(b1), fc_alive.as_deref());
        let h = tape.relu(h, None);
        let wc = self.leaf(tape, pid::FC_CLS_W, scope, false);
        let bc = self.leaf(tape, pid::FC_CLS_B, scope, false);
        let cls = tape.fc(h, wc, Some(bc), None);
        let wb = self.leaf(tape, pid::FC_BOX_W, scope, false);
        let bb = self.leaf(tape, pid::FC_BOX_B, scope, false);
        let bx = tape.fc(h, wb, Some(bb), None);
        (pooled, cls, bx)
    }

    /// Full inference pass. With `mask = None` the masking logic is disabled
    /// entirely; an all-alive mask takes the identical code path with every
    /// skip test passing, so the two agree bit for bit.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor4,
        mask: Option<&ChannelMask>,
        scope: TrainScope,
    ) -> Result<ForwardOut, Error> {
        let spec = &self.spec;
        let shape = images.shape();
        if shape.c != spec.in_channels || shape.h != spec.image_size || shape.w != spec.image_size {
            return Err(Error::Shape(format!(
                "input {} does not match {}x{}x{}",
                shape, spec.in_channels, spec.image_size, spec.image_size
            )));
        }
        let x = tape.constant(images.clone());
        let bb = self.backbone(tape, x, mask, scope);
        let (obj, deltas) = self.proposal_head(tape, bb.stage4, mask, scope);
        let proposals = self.decode_proposals(tape.value(obj), tape.value(deltas));
        let rois: Vec<RoiBox> = proposals
            .iter()
            .enumerate()
            .flat_map(|(n, ps)| {
                ps.iter().map(move |p| RoiBox { batch: n, x0: p.x0, y0: p.y0, x1: p.x1, y1: p.y1 })
            })
            .collect();
        let mut out = ForwardOut {
            stage4: bb.stage4,
            pre_bn: bb.pre_bn,
            considered_gamma: bb.considered_gamma,
            prop_obj: obj,
            prop_deltas: deltas,
            proposals,
            rois: rois.clone(),
            roi_cls: None,
            roi_box: None,
            roi_pooled: None,
            records: Vec::new(),
            detections: vec![Vec::new(); shape.n],
        };
        if rois.is_empty() {
            return Ok(out);
        }
        let (pooled, cls, bx) = self.roi_head(tape, bb.stage4, &rois, mask, scope);
        out.roi_pooled = Some(pooled);
        out.roi_cls = Some(cls);
        out.roi_box = Some(bx);
        let k = spec.classes;
        let cls_v = tape.value(cls);
        let box_v = tape.value(bx);
        for (i, roi) in rois.iter().enumerate() {
            let row = &cls_v.data()[i * (k + 1)..(i + 1) * (k + 1)];
            let probs = softmax_row(row);
            let mut class = 0;
            let mut best = Real::NEG_INFINITY;
            for (ki, &p) in probs.iter().take(k).enumerate() {
                if p > best {
                    best = p;
                    class = ki;
                }
            }
            out.records.push(RoiRecord {
                image: roi.batch,
                x0: roi.x0,
                y0: roi.y0,
                x1: roi.x1,
                y1: roi.y1,
                fg_confidence: 1.0 - probs[k],
                probs,
                class,
            });
        }
        out.detections = self.assemble_detections(&out.records, box_v, shape.n);
        Ok(out)
    }

    /// Refine, threshold, and per-class-NMS the RoI records into detections.
    fn assemble_detections(
        &self,
        records: &[RoiRecord],
        deltas: &Tensor4,
        n_imgs: usize,
    ) -> Vec<Vec<Detection>> {
        let spec = &self.spec;
        let s = spec.image_size as Real;
        let k = spec.classes;
        let mut per_image: Vec<Vec<Detection>> = Vec::with_capacity(n_imgs);
        let mut raw: Vec<Vec<Detection>> = vec![Vec::new(); n_imgs];
        for (i, r) in records.iter().enumerate() {
            let conf = r.probs[r.class];
            if !conf.is_finite() || conf < spec.final_score_threshold {
                continue;
            }
            let t = &deltas.data()[i * 4..i * 4 + 4];
            let rw = r.x1 - r.x0;
            let rh = r.y1 - r.y0;
            let cx = 0.5 * (r.x0 + r.x1) + t[0] * rw;
            let cy = 0.5 * (r.y0 + r.y1) + t[1] * rh;
            let bw = rw * t[2].clamp(-3.0, 3.0).exp();
            let bh = rh * t[3].clamp(-3.0, 3.0).exp();
            let x0 = (cx - 0.5 * bw).clamp(0.0, s);
            let y0 = (cy - 0.5 * bh).clamp(0.0, s);
            let x1 = (cx + 0.5 * bw).clamp(0.0, s);
            let y1 = (cy + 0.5 * bh).clamp(0.0, s);
            if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
                continue;
            }
            raw[r.image].push(Detection {
                x0,
                y0,
                x1,
                y1,
                scores: r.probs.clone(),
                class: r.class,
                confidence: conf,
            });
        }
        for dets in raw {
            let mut kept_all: Vec<Detection> = Vec::new();
            for class in 0..k {
                let idx: Vec<usize> =
                    (0..dets.len()).filter(|&i| dets[i].class == class).collect();
                let boxes: Vec<_> = idx.iter().map(|&i| (dets[i].x0, dets[i].y0, dets[i].x1, dets[i].y1)).collect();
                let scores: Vec<_> = idx.iter().map(|&i| dets[i].confidence).collect();
                for j in nms(&boxes, &scores, spec.final_nms_iou) {
                    kept_all.push(dets[idx[j]].clone());
                }
            }
            kept_all.sort_by(|a, b| {
                b.confidence.partial_cmp(&a.confidence).unwrap().then(a.class.cmp(&b.class))
            });
            per_image.push(kept_all);
        }
        per_image
    }
}

/// Indices (into the record list) of RoIs confidently judged foreground:
/// background probability strictly below the threshold, ranked by foreground
/// confidence, at most `cap` of them.
pub fn select_foreground_rois(
    records: &[RoiRecord],
    background_threshold: Real,
    cap: usize,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].background() < background_threshold)
        .collect();
    idx.sort_by(|&a, &b| {
        records[b]
            .fg_confidence
            .partial_cmp(&records[a].fg_confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(cap);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpCounters;

    fn small_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::default();
        spec.image_size = 32;
        spec.widths = [8, 8, 16, 16];
        spec.fc_dim = 32;
        spec
    }

    fn test_image(spec: &NetworkSpec, n: usize, seed: u64) -> Tensor4 {
        let shape = Shape4::new(n, spec.in_channels, spec.image_size, spec.image_size);
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let data = (0..shape.numel())
            .map(|_| {
                s ^= s >> 12;
                s ^= s << 25;
                s ^= s >> 27;
                (s.wrapping_mul(0x2545f4914f6cdd1d) >> 40) as Real / (1u64 << 24) as Real
            })
            .collect();
        Tensor4::new(shape, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_distinct_across_seeds() {
        let spec = small_spec();
        let a = NetworkState::init(spec.clone(), 11).unwrap();
        let b = NetworkState::init(spec.clone(), 11).unwrap();
        let c = NetworkState::init(spec, 12).unwrap();
        for id in 0..pid::COUNT as u32 {
            assert_eq!(a.param(id).data(), b.param(id).data(), "param {id}");
        }
        assert_ne!(a.param(pid::CONV_W[0]).data(), c.param(pid::CONV_W[0]).data());
        // scales start at one and the snapshot matches
        assert!(a.considered_gamma(0).iter().all(|&g| g == 1.0));
        assert_eq!(a.gamma0(0), a.considered_gamma(0));
    }

    #[test]
    fn identity_mask_matches_disabled_masking_bitwise() {
        let spec = small_spec();
        let state = NetworkState::init(spec.clone(), 5).unwrap();
        let images = test_image(&spec, 2, 3);
        let mask = ChannelMask::all_alive(&spec.considered_channels());

        let mut t0 = Tape::new();
        let out0 = state.forward(&mut t0, &images, None, TrainScope::None).unwrap();
        let mut t1 = Tape::new();
        let out1 = state.forward(&mut t1, &images, Some(&mask), TrainScope::None).unwrap();

        let a = t0.value(out0.stage4).data();
        let b = t1.value(out1.stage4).data();
        assert_eq!(a, b);
        assert_eq!(t0.counters().total(), t1.counters().total());
        assert_eq!(out0.detections.len(), out1.detections.len());
        for (da, db) in out0.detections.iter().flatten().zip(out1.detections.iter().flatten()) {
            assert_eq!(da.x0.to_bits(), db.x0.to_bits());
            assert_eq!(da.confidence.to_bits(), db.confidence.to_bits());
        }
    }

    #[test]
    fn masking_equals_zeroed_scale_and_shift() {
        // killing a channel via the mask must equal running the full network
        // with that channel's scale and shift set to zero
        let spec = small_spec();
        let mut state = NetworkState::init(spec.clone(), 5).unwrap();
        let images = test_image(&spec, 2, 9);
        let mut mask = ChannelMask::all_alive(&spec.considered_channels());
        mask.alive[0][3] = false;
        mask.alive[1][0] = false;
        mask.alive[3][7] = false;

        let mut tm = Tape::new();
        let masked = state.forward(&mut tm, &images, Some(&mask), TrainScope::None).unwrap();

        // physically zero the same channels
        for (l, c) in [(0usize, 3usize), (1, 0), (3, 7)] {
            state.considered_gamma_mut(l)[c] = 0.0;
            let bn = CONSIDERED_BN[l];
            state.param_mut(pid::BN_BETA[bn]).data_mut()[c] = 0.0;
        }
        let mut tz = Tape::new();
        let zeroed = state.forward(&mut tz, &images, None, TrainScope::None).unwrap();

        assert_eq!(tm.value(masked.stage4).data(), tz.value(zeroed.stage4).data());
        // masked path does strictly less arithmetic
        assert!(tm.counters().total() < tz.counters().total());
    }

    #[test]
    fn proposal_decode_hand_case() {
        let spec = NetworkSpec::default();
        let state = NetworkState::init(spec.clone(), 1).unwrap();
        let g = spec.grid();
        // one hot cell at (row 2, col 3), zero deltas everywhere
        let mut obj = vec![-8.0; g * g];
        obj[2 * g + 3] = 6.0;
        let obj = Tensor4::new(Shape4::new(1, 1, g, g), obj).unwrap();
        let deltas = Tensor4::zeros(Shape4::new(1, 4, g, g));
        let props = state.decode_proposals(&obj, &deltas);
        assert_eq!(props.len(), 1);
        assert!(!props[0].is_empty());
        let top = &props[0][0];
        assert_eq!(top.cell, (2, 3));
        // anchor centered at (28, 20) with side 24
        assert!((top.x0 - 16.0).abs() < 1e-9);
        assert!((top.y0 - 8.0).abs() < 1e-9);
        assert!((top.x1 - 40.0).abs() < 1e-9);
        assert!((top.y1 - 32.0).abs() < 1e-9);
        assert!(top.score > 0.99);
        // survivors obey the NMS overlap bound
        for (i, a) in props[0].iter().enumerate() {
            for b in &props[0][i + 1..] {
                assert!(
                    super::super::iou((a.x0, a.y0, a.x1, a.y1), (b.x0, b.y0, b.x1, b.y1))
                        <= spec.proposal.nms_iou + 1e-12
                );
            }
        }
        assert!(props[0].len() <= spec.proposal.top_k);
    }

    #[test]
    fn forward_reports_rois_and_probability_vectors() {
        let spec = small_spec();
        let state = NetworkState::init(spec.clone(), 2).unwrap();
        let images = test_image(&spec, 2, 17);
        let mut tape = Tape::new();
        let out = state.forward(&mut tape, &images, None, TrainScope::None).unwrap();
        assert_eq!(out.rois.len(), out.records.len());
        for r in &out.records {
            let sum: Real = r.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "probs sum {sum}");
            assert_eq!(r.probs.len(), spec.classes + 1);
            assert!(r.class < spec.classes);
            assert!((r.fg_confidence - (1.0 - r.background())).abs() < 1e-12);
        }
        // pre-bn features are the conv outputs: recompute conv1 directly
        let mut scratch = OpCounters::default();
        let w1 = state.param(pid::CONV_W[0]);
        let c1 = crate::tensor::ops::conv2d(&images, w1, None, 1, 1, None, None, &mut scratch);
        assert_eq!(tape.value(out.pre_bn[0]).data(), c1.data());
    }

    #[test]
    fn foreground_selection_is_strict_and_capped() {
        let mk = |bg: Real| RoiRecord {
            image: 0,
            x0: 0.0,
            y0: 0.0,
            x1: 8.0,
            y1: 8.0,
            probs: vec![(1.0 - bg) / 2.0, (1.0 - bg) / 2.0, 0.0, bg],
            class: 0,
            fg_confidence: 1.0 - bg,
        };
        let records: Vec<RoiRecord> =
            [0.2, 0.5, 0.49, 0.51, 0.1].iter().map(|&b| mk(b)).collect();
        let sel = select_foreground_rois(&records, 0.5, 64);
        // 0.50 and 0.51 excluded; ranked by foreground confidence
        assert_eq!(sel, vec![4, 0, 2]);
        let sel = select_foreground_rois(&records, 0.5, 2);
        assert_eq!(sel, vec![4, 0]);
    }
}
