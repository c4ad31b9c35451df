//! Adam with bias correction, keyed by parameter id.
//!
//! Moment buffers appear lazily the first time a parameter receives gradient.
//! Channels frozen by the prune mask are skipped outright — their values and
//! their moments stay untouched until reactivation, which clears the moments
//! through [`Adam::reset_channel`].

use std::collections::BTreeMap;

use crate::detector::{pid, NetworkState, CONSIDERED_BN};
use crate::pruning::ChannelMask;
use crate::tensor::{ParamGrad, Real};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    t: u64,
    m: BTreeMap<u32, Vec<Real>>,
    v: BTreeMap<u32, Vec<Real>>,
}

/// Map a parameter id to its considered-layer index, when it is one of the
/// four prunable scale vectors.
fn considered_layer_of(id: u32) -> Option<usize> {
    CONSIDERED_BN.iter().position(|&bn| pid::BN_GAMMA[bn] == id)
}

impl Adam {
    pub fn new(lr: Real) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from `grads`. When `frozen` is given, elements of
    /// considered scale vectors whose channel is pruned are not touched.
    pub fn step(&mut self, state: &mut NetworkState, grads: &ParamGrad, frozen: Option<&ChannelMask>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, grad) in grads {
            let n = grad.data().len();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let theta = state.param_mut(id).data_mut();
            debug_assert_eq!(theta.len(), n);
            let skip = frozen.and_then(|f| considered_layer_of(id).map(|l| f.layer(l)));
            for i in 0..n {
                if let Some(alive) = skip {
                    if !alive[i] {
                        continue;
                    }
                }
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Clear the moments of one channel of a considered scale vector, so a
    /// revived channel restarts its optimizer history from zero.
    pub fn reset_channel(&mut self, layer: usize, channel: usize) {
        let id = pid::BN_GAMMA[CONSIDERED_BN[layer]];
        if let Some(m) = self.m.get_mut(&id) {
            m[channel] = 0.0;
        }
        if let Some(v) = self.v.get_mut(&id) {
            v[channel] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::NetworkSpec;
    use crate::tensor::{Shape4, Tensor4};

    fn state() -> NetworkState {
        let mut spec = NetworkSpec::default();
        spec.image_size = 16;
        spec.widths = [4, 4, 4, 4];
        NetworkState::init(spec, 0).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction, step one moves each coordinate by exactly
        // lr * g / (|g| + eps·scaled) ≈ lr in magnitude
        let mut st = state();
        let id = pid::BN_GAMMA[0];
        let before = st.param(id).data().to_vec();
        let mut grads = ParamGrad::new();
        let mut g = vec![0.0; before.len()];
        g[0] = 2.5;
        g[1] = -0.3;
        grads.insert(id, Tensor4::new(Shape4::vector(g.len()), g).unwrap());
        let mut adam = Adam::new(0.01);
        adam.step(&mut st, &grads, None);
        let after = st.param(id).data();
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-6);
        assert!((after[1] - (before[1] + 0.01)).abs() < 1e-6);
        assert_eq!(after[2], before[2]);
    }

    #[test]
    fn frozen_channels_do_not_move() {
        let mut st = state();
        let l = 1usize;
        let id = pid::BN_GAMMA[CONSIDERED_BN[l]];
        let mut mask = ChannelMask::all_alive(&st.spec.considered_channels());
        mask.alive[l][2] = false;
        let mut grads = ParamGrad::new();
        grads.insert(id, Tensor4::new(Shape4::vector(4), vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let before = st.param(id).data().to_vec();
        let mut adam = Adam::new(0.05);
        adam.step(&mut st, &grads, Some(&mask));
        adam.step(&mut st, &grads, Some(&mask));
        let after = st.param(id).data();
        assert_eq!(after[2].to_bits(), before[2].to_bits());
        assert!(after[0] < before[0]);
        // reviving clears the channel's moments
        adam.reset_channel(l, 0);
        assert_eq!(adam.m[&id][0], 0.0);
        assert_eq!(adam.v[&id][0], 0.0);
        assert_ne!(adam.m[&id][1], 0.0);
    }
}
