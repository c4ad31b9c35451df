//! Structural FLOPs accounting.
//!
//! Costs are computed from the detector's layer table, never measured: each
//! row gets a closed-form operation count from its shape, the channel mask,
//! and the batch geometry (image count, pooled-RoI count). The same formulas
//! back three consumers:
//!
//! * per-layer forward/backward tables for inspection (`flops-table`),
//! * the cumulative stream ledger with its reduction-vs-baseline figure,
//! * tests that pin the model against the instrumented counters of the
//!   actual tensor ops, bucket by bucket and integer-exact.
//!
//! Forward costs mirror what the instrumented ops really do: masked channels
//! contribute nothing on either side of a convolution, normalization and
//! activation rows charge only alive planes, and the RoI head scales with the
//! number of pooled boxes. The backward model is a structural convention
//! rather than a tape measurement: as soon as anything is trainable, every
//! row charges its forward cost again for activation-gradient propagation,
//! and trainable rows additionally charge a parameter-gradient term
//! (forward-equal for conv/fc; two ops per alive element for a scale, one for
//! a shift). This gives exactly 2x forward for a fully trainable conv/fc
//! stack, strictly between 1x and 2x when only the scale vector trains, and
//! zero when nothing does.
//!
//! Counts are in multiply-accumulates by default; `flops_per_mac` scales
//! every figure for reports that count a MAC as two FLOPs.

use crate::detector::{pid, LayerNode, NetworkSpec, BN_NAMES, CONSIDERED_BN};
use crate::pruning::ChannelMask;
use crate::tensor::OpCounters;

/// Instrumentation bucket a table row belongs to; mirrors [`OpCounters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Conv,
    Bn,
    Relu,
    Pool,
    Add,
    Roi,
    Fc,
}

/// Cost of one layer-table row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: &'static str,
    pub kind: CostKind,
    pub fwd: u64,
    /// Activation-gradient propagation through this row.
    pub bwd_prop: u64,
    /// Gradient of this row's own parameters.
    pub bwd_param: u64,
}

impl LayerCost {
    pub fn bwd(&self) -> u64 {
        self.bwd_prop + self.bwd_param
    }
}

/// Per-layer and total cost of one batch through the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub layers: Vec<LayerCost>,
    pub fwd_total: u64,
    pub bwd_prop_total: u64,
    pub bwd_param_total: u64,
    /// Alive channels per prunable layer, in considered order.
    pub alive_per_layer: Vec<usize>,
    pub images: usize,
    pub rois: usize,
    /// Scale applied to every figure (1 counts MACs, 2 counts FLOPs).
    pub flops_per_mac: u64,
}

impl FlopsReport {
    pub fn bwd_total(&self) -> u64 {
        self.bwd_prop_total + self.bwd_param_total
    }

    pub fn total(&self) -> u64 {
        self.fwd_total + self.bwd_total()
    }

    /// Forward cost folded into the instrumentation buckets, for comparison
    /// against a tape's live counters. Exact at any scale because every
    /// per-row figure is a multiple of `flops_per_mac`.
    pub fn expected_counters(&self) -> OpCounters {
        let mut c = OpCounters::default();
        for l in &self.layers {
            let raw = l.fwd / self.flops_per_mac;
            match l.kind {
                CostKind::Conv => c.conv += raw,
                CostKind::Bn => c.bn += raw,
                CostKind::Relu => c.relu += raw,
                CostKind::Pool => c.pool += raw,
                CostKind::Add => c.add += raw,
                CostKind::Roi => c.roi += raw,
                CostKind::Fc => c.fc += raw,
            }
        }
        c
    }

    /// Plain-text per-layer table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>14} {:>14} {:>14} {:>14}\n",
            "layer", "fwd", "bwd-prop", "bwd-param", "total"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<10} {:>14} {:>14} {:>14} {:>14}\n",
                l.name,
                l.fwd,
                l.bwd_prop,
                l.bwd_param,
                l.fwd + l.bwd()
            ));
        }
        out.push_str(&format!(
            "{:<10} {:>14} {:>14} {:>14} {:>14}\n",
            "total",
            self.fwd_total,
            self.bwd_prop_total,
            self.bwd_param_total,
            self.total()
        ));
        out.push_str(&format!(
            "alive channels per prunable layer: {:?}; images {}, rois {}, x{} per MAC\n",
            self.alive_per_layer, self.images, self.rois, self.flops_per_mac
        ));
        out
    }
}

fn alive(mask: &ChannelMask, slot: usize) -> u64 {
    mask.layer(slot).iter().filter(|&&a| a).count() as u64
}

fn channel_count(mask: &ChannelMask, slot: Option<usize>, unmasked: usize) -> u64 {
    match slot {
        Some(s) => alive(mask, s),
        None => unmasked as u64,
    }
}

/// Raw forward MACs of one table row. `per_roi_zone` is true from the RoI
/// pooling row onward, where work scales with boxes instead of images.
fn row_forward(node: &LayerNode, mask: &ChannelMask, images: u64, rois: u64, per_roi_zone: bool) -> u64 {
    match *node {
        LayerNode::Conv { k, in_ch, out_ch, bias, in_mask, out_mask, out_hw, .. } => {
            let cin = channel_count(mask, in_mask, in_ch);
            let cout = channel_count(mask, out_mask, out_ch);
            let plane = (out_hw * out_hw) as u64;
            let taps = (k * k) as u64;
            images * cout * plane * (cin * taps + u64::from(bias))
        }
        LayerNode::Bn { channels, mask: slot, hw, .. } => {
            2 * images * channel_count(mask, slot, channels) * (hw * hw) as u64
        }
        LayerNode::Relu { channels, mask: slot, hw, .. } => {
            let rows = if per_roi_zone { rois } else { images };
            rows * channel_count(mask, slot, channels) * (hw * hw) as u64
        }
        LayerNode::MaxPool { channels, mask: slot, k, out_hw, .. } => {
            let window = (k * k * out_hw * out_hw) as u64;
            images * channel_count(mask, slot, channels) * window
        }
        // both operands are materialized regardless of the mask, so the sum
        // runs over the full extent
        LayerNode::Add { channels, hw, .. } => images * (channels * hw * hw) as u64,
        LayerNode::RoiAlign { channels, mask: slot, out_hw, .. } => {
            rois * channel_count(mask, slot, channels) * (4 * out_hw * out_hw) as u64
        }
        LayerNode::Fc { in_dim, out_dim, bias, in_mask, per_roi, .. } => {
            let rows = if per_roi { rois } else { images };
            let cin = match in_mask {
                Some((slot, expansion)) => alive(mask, slot) * expansion as u64,
                None => in_dim as u64,
            };
            rows * out_dim as u64 * (cin + u64::from(bias))
        }
    }
}

fn bn_index(name: &str) -> usize {
    BN_NAMES.iter().position(|&n| n == name).expect("unknown bn row")
}

/// Parameter ids whose gradients are produced at this row.
fn row_param_ids(node: &LayerNode) -> Vec<u32> {
    match *node {
        LayerNode::Conv { name, bias, .. } => {
            let w = match name {
                "conv1" => pid::CONV_W[0],
                "conv2" => pid::CONV_W[1],
                "conv3a" => pid::CONV_W[2],
                "conv3b" => pid::CONV_W[3],
                "conv3d" => pid::CONV_W[4],
                "conv4" => pid::CONV_W[5],
                "conv_prop" => pid::PROP_W,
                other => panic!("unknown conv row {other}"),
            };
            let mut ids = vec![w];
            if bias {
                ids.push(pid::PROP_B);
            }
            ids
        }
        LayerNode::Bn { name, .. } => {
            let i = bn_index(name);
            vec![pid::BN_GAMMA[i], pid::BN_BETA[i]]
        }
        LayerNode::Fc { name, .. } => match name {
            "fc1" => vec![pid::FC1_W, pid::FC1_B],
            "fc_cls" => vec![pid::FC_CLS_W, pid::FC_CLS_B],
            "fc_box" => vec![pid::FC_BOX_W, pid::FC_BOX_B],
            other => panic!("unknown fc row {other}"),
        },
        _ => Vec::new(),
    }
}

/// Raw parameter-gradient MACs of one row given which ids actually train.
fn row_param_grad(node: &LayerNode, fwd: u64, mask: &ChannelMask, images: u64, trainable: &[u32]) -> u64 {
    let on = |id: u32| trainable.contains(&id);
    match *node {
        LayerNode::Conv { .. } | LayerNode::Fc { .. } => {
            if row_param_ids(node).iter().any(|&id| on(id)) {
                fwd
            } else {
                0
            }
        }
        LayerNode::Bn { name, channels, mask: slot, hw, .. } => {
            let i = bn_index(name);
            let elems = images * channel_count(mask, slot, channels) * (hw * hw) as u64;
            let gamma = if on(pid::BN_GAMMA[i]) { 2 * elems } else { 0 };
            let beta = if on(pid::BN_BETA[i]) { elems } else { 0 };
            gamma + beta
        }
        _ => 0,
    }
}

fn cost_model(
    spec: &NetworkSpec,
    mask: &ChannelMask,
    trainable: &[u32],
    images: usize,
    rois: usize,
    flops_per_mac: u64,
) -> FlopsReport {
    let widths = spec.considered_channels();
    assert_eq!(
        mask.alive.iter().map(Vec::len).collect::<Vec<_>>(),
        widths,
        "mask does not fit this architecture"
    );
    assert!(flops_per_mac > 0, "flops_per_mac must be positive");
    let any_training = !trainable.is_empty();
    let n = images as u64;
    let m = rois as u64;

    let mut layers = Vec::new();
    let mut per_roi_zone = false;
    for node in spec.layer_table() {
        if matches!(node, LayerNode::RoiAlign { .. }) {
            per_roi_zone = true;
        }
        let fwd = row_forward(&node, mask, n, m, per_roi_zone);
        let (bwd_prop, bwd_param) = if any_training {
            (fwd, row_param_grad(&node, fwd, mask, n, trainable))
        } else {
            (0, 0)
        };
        let kind = match node {
            LayerNode::Conv { .. } => CostKind::Conv,
            LayerNode::Bn { .. } => CostKind::Bn,
            LayerNode::Relu { .. } => CostKind::Relu,
            LayerNode::MaxPool { .. } => CostKind::Pool,
            LayerNode::Add { .. } => CostKind::Add,
            LayerNode::RoiAlign { .. } => CostKind::Roi,
            LayerNode::Fc { .. } => CostKind::Fc,
        };
        layers.push(LayerCost {
            name: node.name(),
            kind,
            fwd: fwd * flops_per_mac,
            bwd_prop: bwd_prop * flops_per_mac,
            bwd_param: bwd_param * flops_per_mac,
        });
    }

    let fwd_total = layers.iter().map(|l| l.fwd).sum();
    let bwd_prop_total = layers.iter().map(|l| l.bwd_prop).sum();
    let bwd_param_total = layers.iter().map(|l| l.bwd_param).sum();
    FlopsReport {
        layers,
        fwd_total,
        bwd_prop_total,
        bwd_param_total,
        alive_per_layer: mask.alive.iter().map(|v| v.iter().filter(|&&a| a).count()).collect(),
        images,
        rois,
        flops_per_mac,
    }
}

/// Forward cost of one batch; backward columns are zero.
pub fn forward_flops(
    spec: &NetworkSpec,
    mask: &ChannelMask,
    images: usize,
    rois: usize,
    flops_per_mac: u64,
) -> FlopsReport {
    cost_model(spec, mask, &[], images, rois, flops_per_mac)
}

/// Forward plus backward cost of one batch. `trainable` lists the parameter
/// ids receiving gradients; when it is empty the backward pass is free.
pub fn backward_flops(
    spec: &NetworkSpec,
    mask: &ChannelMask,
    trainable: &[u32],
    images: usize,
    rois: usize,
    flops_per_mac: u64,
) -> FlopsReport {
    cost_model(spec, mask, trainable, images, rois, flops_per_mac)
}

/// The scale parameters adapted online, the usual training set of a stream
/// run.
pub fn gamma_param_ids() -> Vec<u32> {
    CONSIDERED_BN.iter().map(|&b| pid::BN_GAMMA[b]).collect()
}

/// One stream batch as the accounting sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCost {
    pub round: usize,
    pub images: usize,
    pub rois: usize,
    pub mask: ChannelMask,
    /// False for evaluation-only batches, which never run a backward pass.
    pub backward: bool,
}

/// Forward/backward totals of one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundTotals {
    pub round: usize,
    pub fwd: u64,
    pub bwd: u64,
}

/// Cumulative cost of a stream run next to an unpruned baseline over the
/// same batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsLedger {
    pub rounds: Vec<RoundTotals>,
    pub fwd: u64,
    pub bwd: u64,
    pub baseline_fwd: u64,
    pub baseline_bwd: u64,
}

impl FlopsLedger {
    pub fn total(&self) -> u64 {
        self.fwd + self.bwd
    }

    pub fn baseline_total(&self) -> u64 {
        self.baseline_fwd + self.baseline_bwd
    }

    /// Percentage saved against the unpruned baseline; zero when nothing ran.
    pub fn reduction_percent(&self) -> f64 {
        let base = self.baseline_total();
        if base == 0 {
            0.0
        } else {
            100.0 * (1.0 - self.total() as f64 / base as f64)
        }
    }

    /// Aligned per-round totals with the baseline comparison at the bottom.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>16} {:>16} {:>16}\n",
            "round", "fwd", "bwd", "total"
        );
        for r in &self.rounds {
            out.push_str(&format!(
                "{:>6} {:>16} {:>16} {:>16}\n",
                r.round,
                r.fwd,
                r.bwd,
                r.fwd + r.bwd
            ));
        }
        out.push_str(&format!(
            "{:>6} {:>16} {:>16} {:>16}\n",
            "all", self.fwd, self.bwd, self.total()
        ));
        out.push_str(&format!(
            "{:>6} {:>16} {:>16} {:>16}\n",
            "base", self.baseline_fwd, self.baseline_bwd, self.baseline_total()
        ));
        out.push_str(&format!("saved {:.2}% of the all-channels cost\n", self.reduction_percent()));
        out
    }
}

/// Accumulate per-round and overall totals for a recorded stream, and the
/// same stream costed with every channel alive as the reduction baseline.
pub fn run_flops_ledger(
    spec: &NetworkSpec,
    trainable: &[u32],
    batches: &[BatchCost],
    flops_per_mac: u64,
) -> FlopsLedger {
    let identity = ChannelMask::all_alive(&spec.considered_channels());
    let mut rounds: Vec<RoundTotals> = Vec::new();
    let mut fwd = 0u64;
    let mut bwd = 0u64;
    let mut baseline_fwd = 0u64;
    let mut baseline_bwd = 0u64;
    for b in batches {
        let ids: &[u32] = if b.backward { trainable } else { &[] };
        let cost = cost_model(spec, &b.mask, ids, b.images, b.rois, flops_per_mac);
        let base = cost_model(spec, &identity, ids, b.images, b.rois, flops_per_mac);
        fwd += cost.fwd_total;
        bwd += cost.bwd_total();
        baseline_fwd += base.fwd_total;
        baseline_bwd += base.bwd_total();
        match rounds.last_mut() {
            Some(r) if r.round == b.round => {
                r.fwd += cost.fwd_total;
                r.bwd += cost.bwd_total();
            }
            _ => rounds.push(RoundTotals {
                round: b.round,
                fwd: cost.fwd_total,
                bwd: cost.bwd_total(),
            }),
        }
    }
    FlopsLedger { rounds, fwd, bwd, baseline_fwd, baseline_bwd }
}
