//! Channel masks, the sparsity objective, the gated loss, and stochastic
//! reactivation.
//!
//! A channel is *pruned* when the magnitude of its normalization scale has
//! fallen below the threshold; pruned channels are skipped by compute kernels
//! and excluded from the sparsity penalty (their scales must stay put so they
//! can be revived later). Once the pruned fraction reaches the budget, the
//! penalty switches off, and from then on each pruned channel gets an
//! independent chance per step to come back with its pretrained scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::NetworkState;
use crate::tensor::{NodeId, Real, Tape};

/// Alive flags per considered layer. `alive[l][c]` is false when channel `c`
/// of considered layer `l` is pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub alive: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn all_alive(channels: &[usize]) -> Self {
        ChannelMask { alive: channels.iter().map(|&c| vec![true; c]).collect() }
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.alive[l]
    }

    pub fn total_channels(&self) -> usize {
        self.alive.iter().map(|v| v.len()).sum()
    }

    pub fn pruned_channels(&self) -> usize {
        self.alive.iter().flatten().filter(|&&a| !a).count()
    }

    pub fn alive_channels(&self) -> usize {
        self.total_channels() - self.pruned_channels()
    }

    /// Pruned fraction over all considered channels.
    pub fn ratio(&self) -> Real {
        let total = self.total_channels();
        if total == 0 {
            0.0
        } else {
            self.pruned_channels() as Real / total as Real
        }
    }

    pub fn is_identity(&self) -> bool {
        self.alive.iter().flatten().all(|&a| a)
    }
}

/// Pruning hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Scale-magnitude threshold `t`; channels with |scale| >= t stay alive.
    pub threshold: Real,
    /// Target pruned fraction `p`.
    pub target_ratio: Real,
    /// Sparsity penalty coefficient.
    pub lambda: Real,
    /// Per-channel revival probability once the target is reached.
    pub reactivation_prob: Real,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { threshold: 0.05, target_ratio: 0.1, lambda: 0.05, reactivation_prob: 0.01 }
    }
}

/// Recompute the alive mask from the current scale magnitudes. Exactly the
/// channels with `|scale| < t` are pruned; the boundary |scale| == t survives.
pub fn derive_mask(state: &NetworkState, threshold: Real) -> ChannelMask {
    let alive = (0..crate::detector::CONSIDERED_BN.len())
        .map(|l| state.considered_gamma(l).iter().map(|&g| g.abs() >= threshold).collect())
        .collect();
    ChannelMask { alive }
}

/// Tape node for the masked weighted sparsity penalty
/// `sum over alive channels of |omega * scale|`, plus its current value.
///
/// `omega` holds one sensitivity weight per channel in considered-layer order.
pub fn weighted_sparsity_loss(
    tape: &mut Tape,
    gamma_nodes: &[NodeId],
    omega: &[Vec<Real>],
    mask: &ChannelMask,
) -> NodeId {
    assert_eq!(gamma_nodes.len(), omega.len());
    let mut terms: Vec<NodeId> = Vec::new();
    for (l, &g) in gamma_nodes.iter().enumerate() {
        terms.push(tape.masked_weighted_l1(g, &omega[l], &mask.alive[l]));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add_scaled(acc, Some(t), 1.0, 1.0);
    }
    acc
}

/// Compose the optimization objective: below the target pruned fraction the
/// sparsity penalty is active at weight lambda, at or above it the adaptation
/// loss stands alone.
pub fn gated_total_loss(
    tape: &mut Tape,
    adaptation_loss: NodeId,
    sparsity_loss: NodeId,
    ratio: Real,
    cfg: &PruneConfig,
) -> NodeId {
    if ratio < cfg.target_ratio {
        tape.add_scaled(adaptation_loss, Some(sparsity_loss), 1.0, cfg.lambda)
    } else {
        adaptation_loss
    }
}

/// Outcome of one reactivation sweep.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReactivationReport {
    /// (considered layer, channel) pairs revived this step.
    pub revived: Vec<(usize, usize)>,
    /// Channels that were pruned when the sweep ran.
    pub candidates: usize,
}

/// Give every pruned channel an independent Bernoulli(r) chance to return.
/// Revived channels get their pretrained scale back exactly; the mask is
/// updated in place. Call only once the pruned fraction has reached target.
pub fn stochastic_reactivation<R: Rng>(
    state: &mut NetworkState,
    mask: &mut ChannelMask,
    prob: Real,
    rng: &mut R,
) -> ReactivationReport {
    let mut report = ReactivationReport::default();
    for l in 0..mask.alive.len() {
        for c in 0..mask.alive[l].len() {
            if mask.alive[l][c] {
                continue;
            }
            report.candidates += 1;
            if rng.gen::<Real>() < prob {
                let g0 = state.gamma0(l)[c];
                state.considered_gamma_mut(l)[c] = g0;
                mask.alive[l][c] = true;
                report.revived.push((l, c));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::NetworkSpec;
    use crate::tensor::{Shape4, Tensor4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_state() -> NetworkState {
        let mut spec = NetworkSpec::default();
        spec.image_size = 16;
        spec.widths = [4, 4, 4, 4];
        NetworkState::init(spec, 7).unwrap()
    }

    #[test]
    fn mask_threshold_is_inclusive() {
        let mut state = tiny_state();
        state.considered_gamma_mut(0).copy_from_slice(&[0.04, 0.06, -0.2, 0.0]);
        let mask = derive_mask(&state, 0.05);
        assert_eq!(mask.alive[0], vec![false, true, true, false]);
        // exact boundary stays alive
        state.considered_gamma_mut(0)[0] = 0.05;
        let mask = derive_mask(&state, 0.05);
        assert!(mask.alive[0][0]);
        state.considered_gamma_mut(0)[0] = -0.05;
        let mask = derive_mask(&state, 0.05);
        assert!(mask.alive[0][0]);
    }

    #[test]
    fn ratio_counts_all_considered_channels() {
        let mut mask = ChannelMask::all_alive(&[4, 4, 4, 4]);
        assert_eq!(mask.ratio(), 0.0);
        mask.alive[1][0] = false;
        mask.alive[3][2] = false;
        assert!((mask.ratio() - 2.0 / 16.0).abs() < 1e-12);
        assert_eq!(mask.alive_channels(), 14);
    }

    #[test]
    fn sparsity_loss_skips_pruned_channels() {
        // scales [0.5, -0.2 | 0.01, 0.3], weights all 1, second-layer first
        // channel pruned: loss = 0.5 + 0.2 + 0.3
        let mut tape = Tape::new();
        let g0 = tape.param(0, Tensor4::new(Shape4::vector(2), vec![0.5, -0.2]).unwrap());
        let g1 = tape.param(1, Tensor4::new(Shape4::vector(2), vec![0.01, 0.3]).unwrap());
        let mask = ChannelMask { alive: vec![vec![true, true], vec![false, true]] };
        let omega = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let loss = weighted_sparsity_loss(&mut tape, &[g0, g1], &omega, &mask);
        assert!((tape.scalar(loss) - 1.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        // sign(scale) * weight on alive channels, zero on the pruned one
        assert_eq!(grads.get(&0).unwrap().data(), &[1.0, -1.0]);
        assert_eq!(grads.get(&1).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn gate_switches_exactly_at_target() {
        let cfg = PruneConfig { lambda: 0.25, target_ratio: 0.5, ..PruneConfig::default() };
        let mk = |ratio: Real| {
            let mut tape = Tape::new();
            let adp = tape.constant(Tensor4::new(Shape4::scalar(), vec![2.0]).unwrap());
            let spr = tape.constant(Tensor4::new(Shape4::scalar(), vec![4.0]).unwrap());
            let total = gated_total_loss(&mut tape, adp, spr, ratio, &cfg);
            tape.scalar(total)
        };
        assert!((mk(0.49) - 3.0).abs() < 1e-12); // 2 + 0.25*4
        assert!((mk(0.5) - 2.0).abs() < 1e-12); // gate off at the boundary
        assert!((mk(0.7) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reactivation_restores_pretrained_scale_bit_exactly() {
        let mut state = tiny_state();
        let g0_snapshot = state.gamma0(2).to_vec();
        // prune channels 1 and 3 of layer 2 by crushing their scales
        state.considered_gamma_mut(2)[1] = 1e-9;
        state.considered_gamma_mut(2)[3] = -1e-9;
        let mut mask = derive_mask(&state, 0.05);
        assert_eq!(mask.pruned_channels(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // probability 1 revives everything deterministically
        let report = stochastic_reactivation(&mut state, &mut mask, 1.0, &mut rng);
        assert_eq!(report.candidates, 2);
        assert_eq!(report.revived.len(), 2);
        assert!(mask.is_identity());
        assert_eq!(state.considered_gamma(2)[1].to_bits(), g0_snapshot[1].to_bits());
        assert_eq!(state.considered_gamma(2)[3].to_bits(), g0_snapshot[3].to_bits());
        // probability 0 revives nothing
        state.considered_gamma_mut(2)[1] = 1e-9;
        let mut mask = derive_mask(&state, 0.05);
        let report = stochastic_reactivation(&mut state, &mut mask, 0.0, &mut rng);
        assert_eq!(report.candidates, 1);
        assert!(report.revived.is_empty());
        assert_eq!(mask.pruned_channels(), 1);
    }

    #[test]
    fn reactivation_rate_matches_probability() {
        // 10_000 independent channel draws at r = 0.1 should revive ~10%
        let mut state = tiny_state();
        let mut revived = 0usize;
        let mut total = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..2500 {
            for l in 0..4 {
                for c in 0..4 {
                    state.considered_gamma_mut(l)[c] = 0.0;
                    let _ = c;
                }
            }
            let mut mask = derive_mask(&state, 0.05);
            total += mask.pruned_channels();
            let report = stochastic_reactivation(&mut state, &mut mask, 0.1, &mut rng);
            revived += report.revived.len();
        }
        assert_eq!(total, 40_000);
        let rate = revived as Real / total as Real;
        assert!((0.09..=0.11).contains(&rate), "rate {rate}");
    }
}
