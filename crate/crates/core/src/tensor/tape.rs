//! Wengert-list reverse-mode differentiation.
//!
//! The tape executes operators eagerly (so every node holds its forward
//! value), records one entry per executed op, and replays the record in exact
//! reverse order to accumulate cotangents. Gradients are only propagated into
//! nodes that can reach a parameter, so freezing a parameter set is just a
//! matter of registering those tensors as constants.
//!
//! Scalar loss heads (cross-entropy, smooth-L1, BCE, the Gaussian alignment
//! divergence, the weighted L1 penalty) are fused ops: cheap reductions whose
//! work is excluded from the operation counters by design — the counters model
//! the network graph, not the loss bookkeeping.

use std::collections::BTreeMap;

use super::ops::{self, OpCounters, RoiBox};
use super::{Real, Shape4, Tensor4};
use crate::error::Error;

pub type NodeId = usize;

/// Stable identifier of a network parameter array.
pub type ParamId = u32;

/// Parameter identifier → gradient, in deterministic id order. Only parameters
/// actually reached by the reverse pass appear.
pub type ParamGrad = BTreeMap<ParamId, Tensor4>;

enum Source {
    Constant,
    Param(ParamId),
    Op,
}

struct Node {
    value: Tensor4,
    source: Source,
    needs_grad: bool,
}

enum Record {
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        in_alive: Option<Vec<bool>>,
        out_alive: Option<Vec<bool>>,
        out: NodeId,
    },
    Bn {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<Real>,
        var: Vec<Real>,
        eps: Real,
        alive: Option<Vec<bool>>,
        out: NodeId,
    },
    Relu {
        x: NodeId,
        alive: Option<Vec<bool>>,
        out: NodeId,
    },
    MaxPool {
        x: NodeId,
        alive: Option<Vec<bool>>,
        arg: Vec<u32>,
        out: NodeId,
    },
    Fc {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        in_alive: Option<Vec<bool>>,
        out: NodeId,
    },
    Softmax {
        x: NodeId,
        out: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Reshape {
        x: NodeId,
        out: NodeId,
    },
    ChannelSlice {
        x: NodeId,
        from: usize,
        to: usize,
        out: NodeId,
    },
    RoiAlign {
        x: NodeId,
        boxes: Vec<RoiBox>,
        hw: (usize, usize),
        alive: Option<Vec<bool>>,
        out: NodeId,
    },
    SpatialMean {
        x: NodeId,
        alive: Option<Vec<bool>>,
        out: NodeId,
    },
    GlobalChannelMean {
        x: NodeId,
        alive: Option<Vec<bool>>,
        out: NodeId,
    },
    RowSelectMean {
        x: NodeId,
        rows: Vec<usize>,
        out: NodeId,
    },
    SumAll {
        x: NodeId,
        out: NodeId,
    },
    SigmoidBce {
        z: NodeId,
        targets: Vec<Real>,
        weights: Vec<Real>,
        out: NodeId,
    },
    SmoothL1 {
        pred: NodeId,
        targets: Vec<Real>,
        weights: Vec<Real>,
        beta: Real,
        out: NodeId,
    },
    CrossEntropyRows {
        z: NodeId,
        labels: Vec<usize>,
        weights: Vec<Real>,
        out: NodeId,
    },
    GaussKl {
        mu: NodeId,
        updated_mean: Vec<Real>,
        src_mean: Vec<Real>,
        src_var: Vec<Real>,
        blend: Real,
        weight: Real,
        out: NodeId,
    },
    MaskedWeightedL1 {
        gamma: NodeId,
        omega: Vec<Real>,
        alive: Vec<bool>,
        out: NodeId,
    },
    AddScaled {
        a: NodeId,
        b: Option<NodeId>,
        ca: Real,
        cb: Real,
        out: NodeId,
    },
}

/// Single-owner record of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
    counters: OpCounters,
    consumed: bool,
}

/// Aggregate forward work counted by the kernels this tape ran.
pub type TapeCost = OpCounters;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new(), counters: OpCounters::default(), consumed: false }
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> Real {
        debug_assert_eq!(self.nodes[id].value.shape().numel(), 1);
        self.nodes[id].value.data()[0]
    }

    /// Register a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor4) -> NodeId {
        self.push(value, Source::Constant, false)
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor4) -> NodeId {
        self.push(value, Source::Param(id), true)
    }

    fn push(&mut self, value: Tensor4, source: Source, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, source, needs_grad });
        self.nodes.len() - 1
    }

    fn out_node(&mut self, value: Tensor4, needs: bool) -> NodeId {
        self.push(value, Source::Op, needs)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        in_alive: Option<&[bool]>,
        out_alive: Option<&[bool]>,
    ) -> NodeId {
        let y = ops::conv2d(
            &self.nodes[x].value,
            &self.nodes[w].value,
            b.map(|b| self.nodes[b].value.data()),
            stride,
            pad,
            in_alive,
            out_alive,
            &mut self.counters,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        let out = self.out_node(y, needs);
        self.records.push(Record::Conv {
            x,
            w,
            b,
            stride,
            pad,
            in_alive: in_alive.map(<[bool]>::to_vec),
            out_alive: out_alive.map(<[bool]>::to_vec),
            out,
        });
        out
    }

    /// Normalization with fixed running statistics; `gamma`/`beta` are nodes so
    /// either can be trainable.
    pub fn bn(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[Real],
        var: &[Real],
        eps: Real,
        alive: Option<&[bool]>,
    ) -> NodeId {
        let y = ops::bn_apply(
            &self.nodes[x].value,
            self.nodes[gamma].value.data(),
            self.nodes[beta].value.data(),
            mean,
            var,
            eps,
            alive,
            &mut self.counters,
        );
        let needs = self.needs(&[x, gamma, beta]);
        let out = self.out_node(y, needs);
        self.records.push(Record::Bn {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
            alive: alive.map(<[bool]>::to_vec),
            out,
        });
        out
    }

    pub fn relu(&mut self, x: NodeId, alive: Option<&[bool]>) -> NodeId {
        let y = ops::relu(&self.nodes[x].value, alive, &mut self.counters);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::Relu { x, alive: alive.map(<[bool]>::to_vec), out });
        out
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, alive: Option<&[bool]>) -> NodeId {
        let (y, arg) = ops::maxpool(&self.nodes[x].value, k, alive, &mut self.counters);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::MaxPool { x, alive: alive.map(<[bool]>::to_vec), arg, out });
        out
    }

    pub fn fc(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, in_alive: Option<&[bool]>) -> NodeId {
        let y = ops::fc(
            &self.nodes[x].value,
            &self.nodes[w].value,
            b.map(|b| self.nodes[b].value.data()),
            in_alive,
            &mut self.counters,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        let out = self.out_node(y, needs);
        self.records.push(Record::Fc { x, w, b, in_alive: in_alive.map(<[bool]>::to_vec), out });
        out
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let y = ops::softmax_rows(&self.nodes[x].value);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::Softmax { x, out });
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = ops::add(&self.nodes[a].value, &self.nodes[b].value, &mut self.counters);
        let needs = self.needs(&[a, b]);
        let out = self.out_node(y, needs);
        self.records.push(Record::Add { a, b, out });
        out
    }

    pub fn reshape(&mut self, x: NodeId, shape: Shape4) -> NodeId {
        let y = self.nodes[x].value.reshaped(shape).expect("reshape element count");
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::Reshape { x, out });
        out
    }

    /// Keep channels `from..to` of a (n, c, h, w) tensor.
    pub fn channel_slice(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let xs = xv.shape();
        assert!(from < to && to <= xs.c);
        let os = Shape4::new(xs.n, to - from, xs.h, xs.w);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..xs.n {
            for c in from..to {
                data.extend_from_slice(xv.plane(n, c));
            }
        }
        let y = Tensor4::from_raw_unchecked(os, data);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::ChannelSlice { x, from, to, out });
        out
    }

    pub fn roi_align(
        &mut self,
        x: NodeId,
        boxes: &[RoiBox],
        hw: (usize, usize),
        alive: Option<&[bool]>,
    ) -> NodeId {
        let y = ops::roi_align_values(&self.nodes[x].value, boxes, hw, alive, &mut self.counters);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::RoiAlign {
            x,
            boxes: boxes.to_vec(),
            hw,
            alive: alive.map(<[bool]>::to_vec),
            out,
        });
        out
    }

    pub fn spatial_mean(&mut self, x: NodeId, alive: Option<&[bool]>) -> NodeId {
        let y = ops::spatial_mean(&self.nodes[x].value, alive, &mut self.counters);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::SpatialMean { x, alive: alive.map(<[bool]>::to_vec), out });
        out
    }

    pub fn global_channel_mean(&mut self, x: NodeId, alive: Option<&[bool]>) -> NodeId {
        let y = ops::global_channel_mean(&self.nodes[x].value, alive, &mut self.counters);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::GlobalChannelMean { x, alive: alive.map(<[bool]>::to_vec), out });
        out
    }

    pub fn row_select_mean(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let y = ops::row_select_mean(&self.nodes[x].value, rows, &mut self.counters);
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(y, needs);
        self.records.push(Record::RowSelectMean { x, rows: rows.to_vec(), out });
        out
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: Real = self.nodes[x].value.data().iter().sum();
        let needs = self.nodes[x].needs_grad;
        let out = self.out_node(Tensor4::scalar_value(s), needs);
        self.records.push(Record::SumAll { x, out });
        out
    }

    /// Σ wᵢ·[max(zᵢ,0) − zᵢtᵢ + ln(1+e^{−|zᵢ|})] — numerically stable
    /// binary cross-entropy on logits.
    pub fn sigmoid_bce(&mut self, z: NodeId, targets: &[Real], weights: &[Real]) -> NodeId {
        let zv = self.nodes[z].value.data();
        assert_eq!(zv.len(), targets.len());
        assert_eq!(zv.len(), weights.len());
        let mut loss = 0.0;
        for ((&z, &t), &w) in zv.iter().zip(targets).zip(weights) {
            loss += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
        }
        let needs = self.nodes[z].needs_grad;
        let out = self.out_node(Tensor4::scalar_value(loss), needs);
        self.records.push(Record::SigmoidBce {
            z,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            out,
        });
        out
    }

    /// Σ wᵢ·huber(predᵢ − targetᵢ) with quadratic zone |d| < beta.
    pub fn smooth_l1(&mut self, pred: NodeId, targets: &[Real], weights: &[Real], beta: Real) -> NodeId {
        let pv = self.nodes[pred].value.data();
        assert_eq!(pv.len(), targets.len());
        let mut loss = 0.0;
        for ((&p, &t), &w) in pv.iter().zip(targets).zip(weights) {
            let d = p - t;
            loss += w * if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta };
        }
        let needs = self.nodes[pred].needs_grad;
        let out = self.out_node(Tensor4::scalar_value(loss), needs);
        self.records.push(Record::SmoothL1 {
            pred,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            beta,
            out,
        });
        out
    }

    /// Per-row softmax cross-entropy on (n, c, 1, 1) logits; `weights[n] = 0`
    /// drops a row.
    pub fn cross_entropy_rows(&mut self, z: NodeId, labels: &[usize], weights: &[Real]) -> NodeId {
        let zs = self.nodes[z].value.shape();
        assert_eq!(labels.len(), zs.n);
        assert_eq!(weights.len(), zs.n);
        let zv = self.nodes[z].value.data();
        let mut loss = 0.0;
        for n in 0..zs.n {
            if weights[n] == 0.0 {
                continue;
            }
            let row = &zv[n * zs.c..(n + 1) * zs.c];
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<Real>().ln();
            loss += weights[n] * (lse - row[labels[n]]);
        }
        let needs = self.nodes[z].needs_grad;
        let out = self.out_node(Tensor4::scalar_value(loss), needs);
        self.records.push(Record::CrossEntropyRows {
            z,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            out,
        });
        out
    }

    /// Alignment divergence between diagonal Gaussians sharing the source
    /// covariance, evaluated at the exponentially blended target mean:
    /// `weight · ½ Σ_c (m·prev + (1−m)·μ[c] − μs[c])² / var[c]`.
    ///
    /// Gradient flows only through the current contribution `(1−m)·μ`; the
    /// history term is constant. Returns the scalar node and the updated mean
    /// (to be committed to the running state by the caller).
    pub fn gauss_kl(
        &mut self,
        mu: NodeId,
        prev_ema: &[Real],
        src_mean: &[Real],
        src_var: &[Real],
        momentum: Real,
        weight: Real,
    ) -> (NodeId, Vec<Real>) {
        let muv = self.nodes[mu].value.data();
        assert_eq!(muv.len(), prev_ema.len());
        assert_eq!(muv.len(), src_mean.len());
        let blend = 1.0 - momentum;
        let updated: Vec<Real> = prev_ema
            .iter()
            .zip(muv)
            .map(|(&p, &m)| momentum * p + blend * m)
            .collect();
        let mut loss = 0.0;
        for ((&u, &s), &v) in updated.iter().zip(src_mean).zip(src_var) {
            let d = u - s;
            loss += 0.5 * d * d / v;
        }
        loss *= weight;
        let needs = self.nodes[mu].needs_grad;
        let out = self.out_node(Tensor4::scalar_value(loss), needs);
        self.records.push(Record::GaussKl {
            mu,
            updated_mean: updated.clone(),
            src_mean: src_mean.to_vec(),
            src_var: src_var.to_vec(),
            blend,
            weight,
            out,
        });
        (out, updated)
    }

    /// Σ_alive ωc·|γc| — the sensitivity-weighted magnitude penalty. Pruned
    /// channels contribute neither value nor gradient.
    pub fn masked_weighted_l1(&mut self, gamma: NodeId, omega: &[Real], alive: &[bool]) -> NodeId {
        let gv = self.nodes[gamma].value.data();
        assert_eq!(gv.len(), omega.len());
        assert_eq!(gv.len(), alive.len());
        let mut loss = 0.0;
        for ((&g, &w), &a) in gv.iter().zip(omega).zip(alive) {
            if a {
                loss += (w * g).abs();
            }
        }
        let needs = self.nodes[gamma].needs_grad;
        let out = self.out_node(Tensor4::scalar_value(loss), needs);
        self.records.push(Record::MaskedWeightedL1 {
            gamma,
            omega: omega.to_vec(),
            alive: alive.to_vec(),
            out,
        });
        out
    }

    /// `ca·a + cb·b` over scalar nodes (`b` optional).
    pub fn add_scaled(&mut self, a: NodeId, b: Option<NodeId>, ca: Real, cb: Real) -> NodeId {
        let mut v = ca * self.scalar(a);
        if let Some(b) = b {
            v += cb * self.scalar(b);
        }
        let mut deps = vec![a];
        deps.extend(b);
        let needs = self.needs(&deps);
        let out = self.out_node(Tensor4::scalar_value(v), needs);
        self.records.push(Record::AddScaled { a, b, ca, cb, out });
        out
    }

    /// Reverse pass from a scalar loss node. The tape can only be consumed
    /// once; a second call is a state error.
    pub fn backward(&mut self, loss: NodeId) -> Result<ParamGrad, Error> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by a previous backward pass".into()));
        }
        self.consumed = true;
        if self.nodes[loss].value.shape().numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {}",
                self.nodes[loss].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor4::scalar_value(1.0));

        for rec in self.records.iter().rev() {
            self.replay(rec, &mut grads);
        }

        let mut out = ParamGrad::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Source::Param(id) = node.source {
                if let Some(g) = grads[i].take() {
                    match out.entry(id) {
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            let acc: Vec<Real> = e
                                .get()
                                .data()
                                .iter()
                                .zip(g.data())
                                .map(|(a, b)| a + b)
                                .collect();
                            *e.get_mut() = Tensor4::from_raw_unchecked(g.shape(), acc);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn replay(&self, rec: &Record, grads: &mut [Option<Tensor4>]) {
        fn accumulate(slot: &mut Option<Tensor4>, add: Tensor4) {
            match slot {
                None => *slot = Some(add),
                Some(cur) => {
                    debug_assert_eq!(cur.shape(), add.shape());
                    let data: Vec<Real> =
                        cur.data().iter().zip(add.data()).map(|(a, b)| a + b).collect();
                    *cur = Tensor4::from_raw_unchecked(add.shape(), data);
                }
            }
        }
        let needs = |id: NodeId| self.nodes[id].needs_grad;
        macro_rules! out_grad {
            ($out:expr) => {
                match grads[$out].as_ref() {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }

        match rec {
            Record::Conv { x, w, b, stride, pad, in_alive, out_alive, out } => {
                let dy = out_grad!(*out);
                let ia = in_alive.as_deref();
                let oa = out_alive.as_deref();
                if needs(*x) {
                    let dx = ops::conv2d_vjp_x(
                        &dy,
                        &self.nodes[*w].value,
                        self.nodes[*x].value.shape(),
                        *stride,
                        *pad,
                        ia,
                        oa,
                    );
                    accumulate(&mut grads[*x], dx);
                }
                if needs(*w) {
                    let dw = ops::conv2d_vjp_w(
                        &dy,
                        &self.nodes[*x].value,
                        self.nodes[*w].value.shape(),
                        *stride,
                        *pad,
                        ia,
                        oa,
                    );
                    accumulate(&mut grads[*w], dw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let db = ops::conv2d_vjp_b(&dy, oa);
                        accumulate(&mut grads[*b], Tensor4::from_vector(&db));
                    }
                }
            }
            Record::Bn { x, gamma, beta, mean, var, eps, alive, out } => {
                let dy = out_grad!(*out);
                let (dx, dg, db) = ops::bn_vjp(
                    &dy,
                    &self.nodes[*x].value,
                    self.nodes[*gamma].value.data(),
                    mean,
                    var,
                    *eps,
                    alive.as_deref(),
                    needs(*x),
                    needs(*gamma),
                    needs(*beta),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[*x], dx);
                }
                if let Some(dg) = dg {
                    accumulate(&mut grads[*gamma], Tensor4::from_vector(&dg));
                }
                if let Some(db) = db {
                    accumulate(&mut grads[*beta], Tensor4::from_vector(&db));
                }
            }
            Record::Relu { x, alive, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let dx = ops::relu_vjp(&dy, &self.nodes[*x].value, alive.as_deref());
                    accumulate(&mut grads[*x], dx);
                }
            }
            Record::MaxPool { x, alive, arg, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let dx = ops::maxpool_vjp(&dy, arg, self.nodes[*x].value.shape(), alive.as_deref());
                    accumulate(&mut grads[*x], dx);
                }
            }
            Record::Fc { x, w, b, in_alive, out } => {
                let dy = out_grad!(*out);
                let ia = in_alive.as_deref();
                if needs(*x) {
                    accumulate(&mut grads[*x], ops::fc_vjp_x(&dy, &self.nodes[*w].value, ia));
                }
                if needs(*w) {
                    accumulate(&mut grads[*w], ops::fc_vjp_w(&dy, &self.nodes[*x].value, ia));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        accumulate(&mut grads[*b], Tensor4::from_vector(&ops::fc_vjp_b(&dy)));
                    }
                }
            }
            Record::Softmax { x, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    accumulate(&mut grads[*x], ops::softmax_rows_vjp(&dy, &self.nodes[*out].value));
                }
            }
            Record::Add { a, b, out } => {
                let dy = out_grad!(*out);
                if needs(*a) {
                    accumulate(&mut grads[*a], dy.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[*b], dy);
                }
            }
            Record::Reshape { x, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let back = dy.reshaped(self.nodes[*x].value.shape()).expect("reshape back");
                    accumulate(&mut grads[*x], back);
                }
            }
            Record::ChannelSlice { x, from, to, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let xs = self.nodes[*x].value.shape();
                    let mut dx = vec![0.0; xs.numel()];
                    let plane = xs.plane();
                    for n in 0..xs.n {
                        for (sc, c) in (*from..*to).enumerate() {
                            let src = dy.plane(n, sc);
                            let base = (n * xs.c + c) * plane;
                            dx[base..base + plane].copy_from_slice(src);
                        }
                    }
                    accumulate(&mut grads[*x], Tensor4::from_raw_unchecked(xs, dx));
                }
            }
            Record::RoiAlign { x, boxes, hw, alive, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let dx = ops::roi_align_vjp(
                        &dy,
                        boxes,
                        self.nodes[*x].value.shape(),
                        *hw,
                        alive.as_deref(),
                    );
                    accumulate(&mut grads[*x], dx);
                }
            }
            Record::SpatialMean { x, alive, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let dx =
                        ops::spatial_mean_vjp(&dy, self.nodes[*x].value.shape(), alive.as_deref());
                    accumulate(&mut grads[*x], dx);
                }
            }
            Record::GlobalChannelMean { x, alive, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let dx = ops::global_channel_mean_vjp(
                        &dy,
                        self.nodes[*x].value.shape(),
                        alive.as_deref(),
                    );
                    accumulate(&mut grads[*x], dx);
                }
            }
            Record::RowSelectMean { x, rows, out } => {
                let dy = out_grad!(*out);
                if needs(*x) {
                    let dx = ops::row_select_mean_vjp(&dy, rows, self.nodes[*x].value.shape());
                    accumulate(&mut grads[*x], dx);
                }
            }
            Record::SumAll { x, out } => {
                let g = out_grad!(*out).data()[0];
                if needs(*x) {
                    let xs = self.nodes[*x].value.shape();
                    accumulate(&mut grads[*x], Tensor4::full(xs, g));
                }
            }
            Record::SigmoidBce { z, targets, weights, out } => {
                let g = out_grad!(*out).data()[0];
                if needs(*z) {
                    let zv = self.nodes[*z].value.data();
                    let data: Vec<Real> = zv
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&z, &t), &w)| {
                            let sig = 1.0 / (1.0 + (-z).exp());
                            g * w * (sig - t)
                        })
                        .collect();
                    accumulate(
                        &mut grads[*z],
                        Tensor4::from_raw_unchecked(self.nodes[*z].value.shape(), data),
                    );
                }
            }
            Record::SmoothL1 { pred, targets, weights, beta, out } => {
                let g = out_grad!(*out).data()[0];
                if needs(*pred) {
                    let pv = self.nodes[*pred].value.data();
                    let data: Vec<Real> = pv
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&p, &t), &w)| {
                            let d = p - t;
                            let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                            g * w * dd
                        })
                        .collect();
                    accumulate(
                        &mut grads[*pred],
                        Tensor4::from_raw_unchecked(self.nodes[*pred].value.shape(), data),
                    );
                }
            }
            Record::CrossEntropyRows { z, labels, weights, out } => {
                let g = out_grad!(*out).data()[0];
                if needs(*z) {
                    let zs = self.nodes[*z].value.shape();
                    let zv = self.nodes[*z].value.data();
                    let mut dz = vec![0.0; zv.len()];
                    for n in 0..zs.n {
                        if weights[n] == 0.0 {
                            continue;
                        }
                        let row = &zv[n * zs.c..(n + 1) * zs.c];
                        let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                        let exps: Vec<Real> = row.iter().map(|&v| (v - m).exp()).collect();
                        let z_sum: Real = exps.iter().sum();
                        for i in 0..zs.c {
                            let p = exps[i] / z_sum;
                            let one = if i == labels[n] { 1.0 } else { 0.0 };
                            dz[n * zs.c + i] = g * weights[n] * (p - one);
                        }
                    }
                    accumulate(&mut grads[*z], Tensor4::from_raw_unchecked(zs, dz));
                }
            }
            Record::GaussKl { mu, updated_mean, src_mean, src_var, blend, weight, out } => {
                let g = out_grad!(*out).data()[0];
                if needs(*mu) {
                    let data: Vec<Real> = updated_mean
                        .iter()
                        .zip(src_mean)
                        .zip(src_var)
                        .map(|((&u, &s), &v)| g * weight * blend * (u - s) / v)
                        .collect();
                    accumulate(
                        &mut grads[*mu],
                        Tensor4::from_raw_unchecked(self.nodes[*mu].value.shape(), data),
                    );
                }
            }
            Record::MaskedWeightedL1 { gamma, omega, alive, out } => {
                let g = out_grad!(*out).data()[0];
                if needs(*gamma) {
                    let gv = self.nodes[*gamma].value.data();
                    let data: Vec<Real> = gv
                        .iter()
                        .zip(omega)
                        .zip(alive)
                        .map(|((&gam, &w), &a)| {
                            if a && gam != 0.0 {
                                g * w * gam.signum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(
                        &mut grads[*gamma],
                        Tensor4::from_raw_unchecked(self.nodes[*gamma].value.shape(), data),
                    );
                }
            }
            Record::AddScaled { a, b, ca, cb, out } => {
                let g = out_grad!(*out).data()[0];
                if needs(*a) {
                    accumulate(&mut grads[*a], Tensor4::scalar_value(g * ca));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        accumulate(&mut grads[*b], Tensor4::scalar_value(g * cb));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_diff, max_rel_err};

    fn rng_vec(len: usize, seed: u64) -> Vec<Real> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                z ^= z >> 31;
                (z >> 11) as Real / (1u64 << 52) as Real - 1.0
            })
            .collect()
    }

    #[test]
    fn gamma_gradient_is_sum_of_normalized_activations() {
        let x = Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let g = tape.param(0, Tensor4::from_vector(&[1.5]));
        let b = tape.constant(Tensor4::from_vector(&[0.0]));
        let y = tape.bn(xn, g, b, &[0.0], &[1.0], 1e-12, None);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let expect: Real = x.data().iter().sum();
        assert!((grads[&0].data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn masked_channel_gamma_gets_zero_gradient() {
        let x = Tensor4::new(Shape4::new(1, 2, 2, 2), rng_vec(8, 1)).unwrap();
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let g = tape.param(0, Tensor4::from_vector(&[1.0, 1.0]));
        let b = tape.constant(Tensor4::from_vector(&[0.0, 0.0]));
        let alive = [false, true];
        let y = tape.bn(xn, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-9, Some(&alive));
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[&0].data()[0], 0.0);
        assert_ne!(grads[&0].data()[1], 0.0);
    }

    #[test]
    fn untouched_parameter_is_absent_from_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(0, Tensor4::scalar_value(2.0));
        let _unused = tape.param(1, Tensor4::scalar_value(5.0));
        let loss = tape.add_scaled(a, None, 3.0, 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key(&0));
        assert!(!grads.contains_key(&1));
    }

    #[test]
    fn tape_consumed_twice_is_a_state_error() {
        let mut tape = Tape::new();
        let a = tape.param(0, Tensor4::scalar_value(1.0));
        let loss = tape.add_scaled(a, None, 1.0, 0.0);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
    }

    /// Build a 2-layer conv→bn→relu→conv→bn net, return loss as a function of
    /// the two γ vectors (for finite differencing) and the analytic gradient.
    fn two_stage_gamma_loss(gammas: &[Real]) -> (Real, Vec<Real>) {
        let x = Tensor4::new(Shape4::new(1, 2, 6, 6), rng_vec(72, 42)).unwrap();
        let w1 = Tensor4::new(Shape4::new(3, 2, 3, 3), rng_vec(54, 43)).unwrap();
        let w2 = Tensor4::new(Shape4::new(2, 3, 3, 3), rng_vec(54, 44)).unwrap();
        let mean1 = rng_vec(3, 45);
        let var1: Vec<Real> = rng_vec(3, 46).iter().map(|v| 1.0 + v.abs()).collect();
        let mean2 = rng_vec(2, 47);
        let var2: Vec<Real> = rng_vec(2, 48).iter().map(|v| 1.0 + v.abs()).collect();

        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let w1n = tape.constant(w1);
        let w2n = tape.constant(w2);
        let g1 = tape.param(0, Tensor4::from_vector(&gammas[..3]));
        let g2 = tape.param(1, Tensor4::from_vector(&gammas[3..]));
        let b1 = tape.constant(Tensor4::from_vector(&[0.1, -0.2, 0.3]));
        let b2 = tape.constant(Tensor4::from_vector(&[0.05, -0.05]));

        let c1 = tape.conv(xn, w1n, None, 1, 1, None, None);
        let n1 = tape.bn(c1, g1, b1, &mean1, &var1, 1e-5, None);
        let r1 = tape.relu(n1, None);
        let c2 = tape.conv(r1, w2n, None, 2, 1, None, None);
        let n2 = tape.bn(c2, g2, b2, &mean2, &var2, 1e-5, None);
        let r2 = tape.relu(n2, None);
        let pooled = tape.global_channel_mean(r2, None);
        let (kl, _) = tape.gauss_kl(pooled, &[0.0, 0.0], &[0.3, -0.4], &[1.0, 2.0], 0.9, 1.0);
        let sm = tape.spatial_mean(r2, None);
        let sl = tape.smooth_l1(sm, &rng_vec(2, 49), &[1.0, 1.0], 1.0);
        let loss = tape.add_scaled(kl, Some(sl), 1.0, 0.7);

        let value = tape.scalar(loss);
        let grads = tape.backward(loss).unwrap();
        let mut flat = grads[&0].data().to_vec();
        flat.extend_from_slice(grads[&1].data());
        (value, flat)
    }

    #[test]
    fn two_stage_gamma_gradients_match_finite_differences() {
        let g0: Vec<Real> = rng_vec(5, 50).iter().map(|v| 1.0 + 0.3 * v).collect();
        let (_, analytic) = two_stage_gamma_loss(&g0);
        let numeric = central_diff(&mut |g: &[Real]| two_stage_gamma_loss(g).0, &g0, 1e-4);
        let err = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    /// Full-parameter check through conv weights, bias, fc, pooling, RoI and
    /// the fused heads, exercising gradient accumulation via a skip connection.
    fn kitchen_sink_loss(theta: &[Real]) -> (Real, Vec<Real>) {
        let (wlen, blen, flen) = (2 * 2 * 9, 2, 2 * 8);
        let w = Tensor4::new(Shape4::new(2, 2, 3, 3), theta[..wlen].to_vec()).unwrap();
        let bias = theta[wlen..wlen + blen].to_vec();
        let fw = Tensor4::new(Shape4::rows(2, 8), theta[wlen + blen..wlen + blen + flen].to_vec())
            .unwrap();
        let x = Tensor4::new(Shape4::new(1, 2, 4, 4), rng_vec(32, 60)).unwrap();

        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let wn = tape.param(0, w);
        let bn = tape.param(1, Tensor4::from_vector(&bias));
        let fwn = tape.param(2, fw);

        let c = tape.conv(xn, wn, Some(bn), 1, 1, None, None);
        let r = tape.relu(c, None);
        let skip = tape.add(c, r);
        let boxes = [RoiBox { batch: 0, x0: 0.4, y0: 0.6, x1: 3.2, y1: 3.6 }];
        let roi = tape.roi_align(skip, &boxes, (2, 2), None);
        let rows = tape.reshape(roi, Shape4::rows(1, 8));
        let logits = tape.fc(rows, fwn, None, None);
        let ce = tape.cross_entropy_rows(logits, &[1], &[1.0]);
        let sm = tape.spatial_mean(skip, None);
        let bce = tape.sigmoid_bce(sm, &[1.0, 0.0], &[0.5, 0.5]);
        let loss = tape.add_scaled(ce, Some(bce), 1.0, 1.3);

        let value = tape.scalar(loss);
        let grads = tape.backward(loss).unwrap();
        let mut flat = grads[&0].data().to_vec();
        flat.extend_from_slice(grads[&1].data());
        flat.extend_from_slice(grads[&2].data());
        (value, flat)
    }

    #[test]
    fn full_parameter_gradients_match_finite_differences() {
        let theta: Vec<Real> = rng_vec(36 + 2 + 16, 61).iter().map(|v| 0.5 * v).collect();
        let (_, analytic) = kitchen_sink_loss(&theta);
        let numeric = central_diff(&mut |t: &[Real]| kitchen_sink_loss(t).0, &theta, 1e-4);
        let err = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn maxpool_softmax_loss(theta: &[Real]) -> (Real, Vec<Real>) {
        let x = Tensor4::new(Shape4::new(1, 1, 4, 4), theta.to_vec()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(0, x);
        let p = tape.maxpool(xn, 2, None);
        let rows = tape.reshape(p, Shape4::rows(1, 4));
        let sm = tape.softmax(rows);
        let picked = tape.channel_slice(sm, 1, 3);
        let loss = tape.sum_all(picked);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss).unwrap();
        (value, grads[&0].data().to_vec())
    }

    #[test]
    fn maxpool_softmax_slice_gradients_match_finite_differences() {
        // values well separated so the pool argmax is stable under ±h
        let theta: Vec<Real> = (0..16).map(|i| (i * i % 13) as Real * 0.37 + 0.01 * i as Real).collect();
        let (_, analytic) = maxpool_softmax_loss(&theta);
        let numeric = central_diff(&mut |t: &[Real]| maxpool_softmax_loss(t).0, &theta, 1e-4);
        let err = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let run = |ca: Real, cb: Real| -> Vec<Real> {
            let x = Tensor4::new(Shape4::new(1, 2, 3, 3), rng_vec(18, 70)).unwrap();
            let mut tape = Tape::new();
            let xn = tape.constant(x);
            let g = tape.param(0, Tensor4::from_vector(&[0.8, 1.2]));
            let b = tape.constant(Tensor4::from_vector(&[0.0, 0.0]));
            let y = tape.bn(xn, g, b, &[0.1, -0.1], &[1.0, 0.5], 1e-6, None);
            let r = tape.relu(y, None);
            let l1 = tape.sum_all(r);
            let pooled = tape.global_channel_mean(y, None);
            let l2 = tape.smooth_l1(pooled, &[0.3, 0.4], &[1.0, 1.0], 1.0);
            let loss = tape.add_scaled(l1, Some(l2), ca, cb);
            let grads = tape.backward(loss).unwrap();
            grads[&0].data().to_vec()
        };
        let ga = run(1.0, 0.0);
        let gb = run(0.0, 1.0);
        let gc = run(2.5, -1.5);
        for i in 0..2 {
            assert!((gc[i] - (2.5 * ga[i] - 1.5 * gb[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn gauss_kl_closed_form_and_gradient() {
        let mut tape = Tape::new();
        let mu = tape.param(0, Tensor4::from_vector(&[1.0, 0.0]));
        // momentum 0 → updated mean is exactly the batch mean
        let (kl, updated) = tape.gauss_kl(mu, &[0.0, 0.0], &[0.0, 0.0], &[1.0, 4.0], 0.0, 1.0);
        assert!((tape.scalar(kl) - 0.5).abs() < 1e-12);
        assert_eq!(updated, vec![1.0, 0.0]);
        let grads = tape.backward(kl).unwrap();
        assert!((grads[&0].data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(grads[&0].data()[1], 0.0);
    }

    #[test]
    fn weighted_l1_value_and_gradient() {
        let mut tape = Tape::new();
        let g = tape.param(0, Tensor4::from_vector(&[1.0, -2.0, 0.4]));
        let loss = tape.masked_weighted_l1(g, &[1.0, 1.0, 5.0], &[true, true, false]);
        assert!((tape.scalar(loss) - 3.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[&0].data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn frozen_weights_receive_no_gradient_but_activations_flow() {
        let x = Tensor4::new(Shape4::new(1, 1, 4, 4), rng_vec(16, 80)).unwrap();
        let w = Tensor4::new(Shape4::new(2, 1, 3, 3), rng_vec(18, 81)).unwrap();
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let wn = tape.constant(w); // frozen
        let g = tape.param(7, Tensor4::from_vector(&[1.0, 1.0]));
        let b = tape.constant(Tensor4::from_vector(&[0.0, 0.0]));
        let c = tape.conv(xn, wn, None, 1, 1, None, None);
        let y = tape.bn(c, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-6, None);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains_key(&7));
        assert!(grads[&7].data().iter().any(|&v| v != 0.0));
    }
}
