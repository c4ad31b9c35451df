//! The tiny two-stage detector.
//!
//! Backbone: four Conv-BN-ReLU stages with widths `[16, 32, 64, 64]`, a 2×2
//! max-pool after stage 1, and a residual down-sampling block at stage 3 (main
//! branch conv3a/conv3b, shortcut conv3d). A dense proposal head predicts one
//! objectness logit and four box deltas per cell of the final 8×8 map; an RoI
//! head pools each proposal to 4×4 and classifies it over K classes plus
//! background.
//!
//! Four of the six normalization layers participate in pruning: `bn1`, `bn2`,
//! `bn3b`, and `bn4`. The first group of the residual main branch (`bn3a`) and
//! the down-sampling shortcut group (`bn3d`) are exempt, and the convolutions
//! they feed are likewise never masked on their input side — the residual
//! addition mixes masked and unmasked branches, so only channel sets that stay
//! aligned across the join are prunable.

mod pretrain;
mod state;

pub use pretrain::{finalize_bn_stats, pretrain_source, PretrainConfig};
pub use state::{
    pid, select_foreground_rois, softmax_row, ForwardOut, NetworkState, Proposal, RoiRecord,
    TrainScope,
};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::Real;

/// Ground-truth box in image pixels with a class label in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub x0: Real,
    pub y0: Real,
    pub x1: Real,
    pub y1: Real,
    pub class: usize,
}

/// One labeled image.
#[derive(Debug, Clone)]
pub struct Sample {
    /// (1, C, S, S) pixel tensor in [0, 1].
    pub image: crate::tensor::Tensor4,
    pub boxes: Vec<GtBox>,
}

/// Final detector output for one object.
#[derive(Debug, Clone)]
pub struct Detection {
    pub x0: Real,
    pub y0: Real,
    pub x1: Real,
    pub y1: Real,
    /// Probability vector over K classes plus background (last entry).
    pub scores: Vec<Real>,
    pub class: usize,
    pub confidence: Real,
}

impl Detection {
    pub fn background_confidence(&self) -> Real {
        *self.scores.last().unwrap()
    }
}

/// Proposal-stage settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Side length of the square anchor centered on each cell, in pixels.
    pub anchor_size: Real,
    /// Proposals kept per image after NMS.
    pub top_k: usize,
    /// NMS IoU threshold at the proposal stage.
    pub nms_iou: Real,
    /// Minimum decoded box side, in pixels.
    pub min_size: Real,
}

/// Complete structural description of the network. Every layer shape is
/// derived from these fields, so two specs with equal fields describe
/// interchangeable parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input channels (1 = grayscale, 3 = RGB).
    pub in_channels: usize,
    /// Square input resolution; must be divisible by 8.
    pub image_size: usize,
    /// Backbone stage widths.
    pub widths: [usize; 4],
    /// Object classes K (background is implicit).
    pub classes: usize,
    /// RoI pooling output side.
    pub roi_size: usize,
    /// Hidden width of the RoI head.
    pub fc_dim: usize,
    pub proposal: ProposalConfig,
    /// IoU threshold for per-class NMS over final detections.
    pub final_nms_iou: Real,
    /// Minimum class confidence for an emitted detection.
    pub final_score_threshold: Real,
    /// RoIs with background probability strictly below this are foreground.
    pub background_threshold: Real,
    /// Cap on foreground RoIs used for statistics per batch.
    pub max_rois: usize,
    /// Normalization epsilon.
    pub bn_eps: Real,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            in_channels: 3,
            image_size: 64,
            widths: [16, 32, 64, 64],
            classes: 3,
            roi_size: 4,
            fc_dim: 128,
            proposal: ProposalConfig { anchor_size: 24.0, top_k: 32, nms_iou: 0.7, min_size: 2.0 },
            final_nms_iou: 0.5,
            final_score_threshold: 0.05,
            background_threshold: 0.5,
            max_rois: 64,
            bn_eps: 1e-5,
        }
    }
}

/// Names of the six normalization layers in execution order.
pub const BN_NAMES: [&str; 6] = ["bn1", "bn2", "bn3a", "bn3b", "bn3d", "bn4"];

/// Archive section names of the 26 parameters, in parameter-id order.
pub const PARAM_NAMES: [&str; 26] = [
    "conv1.w", "bn1.gamma", "bn1.beta", "conv2.w", "bn2.gamma", "bn2.beta", "conv3a.w",
    "bn3a.gamma", "bn3a.beta", "conv3b.w", "bn3b.gamma", "bn3b.beta", "conv3d.w", "bn3d.gamma",
    "bn3d.beta", "conv4.w", "bn4.gamma", "bn4.beta", "prop.w", "prop.b", "fc1.w", "fc1.b",
    "fc_cls.w", "fc_cls.b", "fc_box.w", "fc_box.b",
];

/// Indices into [`BN_NAMES`] of the four layers considered for pruning.
pub const CONSIDERED_BN: [usize; 4] = [0, 1, 3, 5];

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.image_size % 8 != 0 || self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of 8 and at least 16",
                self.image_size
            )));
        }
        if self.in_channels == 0 || self.classes == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if !(0.0 < self.background_threshold && self.background_threshold < 1.0) {
            return Err(Error::Config("background_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Channels of each of the six normalization layers.
    pub fn bn_channels(&self) -> [usize; 6] {
        let [w1, w2, w3, w4] = self.widths;
        [w1, w2, w3, w3, w3, w4]
    }

    /// Channel counts of the considered layers, in [`CONSIDERED_BN`] order.
    pub fn considered_channels(&self) -> Vec<usize> {
        let all = self.bn_channels();
        CONSIDERED_BN.iter().map(|&i| all[i]).collect()
    }

    pub fn considered_names(&self) -> Vec<&'static str> {
        CONSIDERED_BN.iter().map(|&i| BN_NAMES[i]).collect()
    }

    pub fn total_considered_channels(&self) -> usize {
        self.considered_channels().iter().sum()
    }

    /// Feature-map side length at each considered layer (stride 1, 2, 4, 8).
    pub fn considered_resolutions(&self) -> Vec<usize> {
        let s = self.image_size;
        vec![s, s / 2, s / 4, s / 8]
    }

    /// Side length of the final backbone map.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    /// Flattened RoI-head input width.
    pub fn roi_flat_dim(&self) -> usize {
        self.widths[3] * self.roi_size * self.roi_size
    }

    /// Stable canonical description; hashed into every archive so artifacts
    /// from a different architecture are rejected at load.
    pub fn canonical_description(&self) -> String {
        format!(
            "netspec v1|in={} size={} widths={},{},{},{} classes={} roi={} fc={} \
             anchor={} topk={} pnms={} minsz={} fnms={} fscore={} bg={} maxroi={} eps={}",
            self.in_channels,
            self.image_size,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.widths[3],
            self.classes,
            self.roi_size,
            self.fc_dim,
            self.proposal.anchor_size,
            self.proposal.top_k,
            self.proposal.nms_iou,
            self.proposal.min_size,
            self.final_nms_iou,
            self.final_score_threshold,
            self.background_threshold,
            self.max_rois,
            self.bn_eps,
        )
    }

    pub fn spec_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.canonical_description().as_bytes());
        h.finalize().into()
    }

    /// The ordered layer table: one row per costed operation of a full
    /// forward pass, with enough structure for the analytic cost model.
    pub fn layer_table(&self) -> Vec<LayerNode> {
        let [w1, w2, w3, w4] = self.widths;
        let s = self.image_size;
        let g = self.grid();
        let k_props = self.classes + 1;
        vec![
            LayerNode::Conv { name: "conv1", k: 3, stride: 1, pad: 1, in_ch: self.in_channels, out_ch: w1, bias: false, in_mask: None, out_mask: Some(0), out_hw: s },
            LayerNode::Bn { name: "bn1", channels: w1, mask: Some(0), hw: s },
            LayerNode::Relu { name: "relu1", channels: w1, mask: Some(0), hw: s },
            LayerNode::MaxPool { name: "pool1", channels: w1, mask: Some(0), k: 2, out_hw: s / 2 },
            LayerNode::Conv { name: "conv2", k: 3, stride: 1, pad: 1, in_ch: w1, out_ch: w2, bias: false, in_mask: Some(0), out_mask: Some(1), out_hw: s / 2 },
            LayerNode::Bn { name: "bn2", channels: w2, mask: Some(1), hw: s / 2 },
            LayerNode::Relu { name: "relu2", channels: w2, mask: Some(1), hw: s / 2 },
            LayerNode::Conv { name: "conv3a", k: 3, stride: 2, pad: 1, in_ch: w2, out_ch: w3, bias: false, in_mask: None, out_mask: None, out_hw: s / 4 },
            LayerNode::Bn { name: "bn3a", channels: w3, mask: None, hw: s / 4 },
            LayerNode::Relu { name: "relu3a", channels: w3, mask: None, hw: s / 4 },
            LayerNode::Conv { name: "conv3b", k: 3, stride: 1, pad: 1, in_ch: w3, out_ch: w3, bias: false, in_mask: None, out_mask: Some(2), out_hw: s / 4 },
            LayerNode::Bn { name: "bn3b", channels: w3, mask: Some(2), hw: s / 4 },
            LayerNode::Conv { name: "conv3d", k: 1, stride: 2, pad: 0, in_ch: w2, out_ch: w3, bias: false, in_mask: None, out_mask: None, out_hw: s / 4 },
            LayerNode::Bn { name: "bn3d", channels: w3, mask: None, hw: s / 4 },
            LayerNode::Add { name: "add3", channels: w3, hw: s / 4 },
            LayerNode::Relu { name: "relu3", channels: w3, mask: None, hw: s / 4 },
            LayerNode::Conv { name: "conv4", k: 3, stride: 2, pad: 1, in_ch: w3, out_ch: w4, bias: false, in_mask: None, out_mask: Some(3), out_hw: g },
            LayerNode::Bn { name: "bn4", channels: w4, mask: Some(3), hw: g },
            LayerNode::Relu { name: "relu4", channels: w4, mask: Some(3), hw: g },
            LayerNode::Conv { name: "conv_prop", k: 3, stride: 1, pad: 1, in_ch: w4, out_ch: 5, bias: true, in_mask: Some(3), out_mask: None, out_hw: g },
            LayerNode::RoiAlign { name: "roi_align", channels: w4, mask: Some(3), out_hw: self.roi_size },
            LayerNode::Fc { name: "fc1", in_dim: self.roi_flat_dim(), out_dim: self.fc_dim, bias: true, in_mask: Some((3, self.roi_size * self.roi_size)), per_roi: true },
            LayerNode::Relu { name: "relu_fc1", channels: self.fc_dim, mask: None, hw: 1 },
            LayerNode::Fc { name: "fc_cls", in_dim: self.fc_dim, out_dim: k_props, bias: true, in_mask: None, per_roi: true },
            LayerNode::Fc { name: "fc_box", in_dim: self.fc_dim, out_dim: 4, bias: true, in_mask: None, per_roi: true },
        ]
    }
}

/// One row of the cost-model layer table. `mask`/`in_mask`/`out_mask` values
/// index the considered-layer mask set; `None` means the dimension is never
/// masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerNode {
    Conv {
        name: &'static str,
        k: usize,
        stride: usize,
        pad: usize,
        in_ch: usize,
        out_ch: usize,
        bias: bool,
        in_mask: Option<usize>,
        out_mask: Option<usize>,
        out_hw: usize,
    },
    Bn { name: &'static str, channels: usize, mask: Option<usize>, hw: usize },
    Relu { name: &'static str, channels: usize, mask: Option<usize>, hw: usize },
    MaxPool { name: &'static str, channels: usize, mask: Option<usize>, k: usize, out_hw: usize },
    Add { name: &'static str, channels: usize, hw: usize },
    /// Charged per RoI.
    RoiAlign { name: &'static str, channels: usize, mask: Option<usize>, out_hw: usize },
    Fc {
        name: &'static str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        /// (considered mask index, spatial expansion per channel).
        in_mask: Option<(usize, usize)>,
        per_roi: bool,
    },
}

impl LayerNode {
    pub fn name(&self) -> &'static str {
        match self {
            LayerNode::Conv { name, .. }
            | LayerNode::Bn { name, .. }
            | LayerNode::Relu { name, .. }
            | LayerNode::MaxPool { name, .. }
            | LayerNode::Add { name, .. }
            | LayerNode::RoiAlign { name, .. }
            | LayerNode::Fc { name, .. } => name,
        }
    }
}

/// Intersection-over-union of two pixel boxes.
pub fn iou(a: (Real, Real, Real, Real), b: (Real, Real, Real, Real)) -> Real {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy score-descending NMS over (box, score) pairs; returns kept indices.
/// Ties break by input order, so the result is deterministic.
pub fn nms(boxes: &[(Real, Real, Real, Real)], scores: &[Real], iou_threshold: Real) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| iou(boxes[i], boxes[j]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
