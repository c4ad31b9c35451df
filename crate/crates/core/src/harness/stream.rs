//! The continual driver: walks the corrupted-condition stream round by round,
//! adapts (or merely evaluates) on each batch, and gathers every artifact a
//! run produces — per-batch log rows, per-condition detection quality, the
//! compute ledger, and a digest trail proving the updates were online.
//!
//! One [`AdaptState`] lives across the whole stream. Conditions are visited
//! in order within each round and rounds repeat the same visiting order, so
//! the network never gets a reset between domains — exactly the setting the
//! running means, the optimizer moments, and the reactivation draws are
//! shared state for.

use crate::adaptation::{adapt_batch, AdaptState};
use crate::detector::{Detection, GtBox, NetworkState, Sample, TrainScope};
use crate::error::Error;
use crate::flops::{
    backward_flops, forward_flops, gamma_param_ids, run_flops_ledger, BatchCost, FlopsLedger,
};
use crate::pruning::{derive_mask, ChannelMask};
use crate::stats::SourceStats;
use crate::tensor::{Shape4, Tape, Tensor4};

use super::config::{Condition, ExperimentConfig};
use super::corrupt::corrupt;
use super::eval::evaluate_map50;
use super::metrics::{BatchRow, MetricsWriter, SummaryCell, SummaryTable};
use super::scene::generate_source;

/// One corrupted domain: a condition label and its fixed image set. The same
/// images return in every round, which is what makes per-round quality
/// numbers comparable down a column.
pub struct TargetSet {
    pub name: String,
    pub data: Vec<Sample>,
}

/// Seed for the stochastic part of a corruption, mixed so that every
/// (condition, image) pair draws an independent stream while the whole target
/// suite stays a pure function of the stream seed.
fn corruption_seed(base: u64, condition: usize, image: usize) -> u64 {
    let mut z = base
        ^ 0x9E37_79B9_7F4A_7C15u64
            .wrapping_mul(condition as u64 + 1)
            .wrapping_add(image as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Applies one condition to a clean labeled set. `stream_index` separates the
/// stochastic corruption draws of different conditions built from the same
/// base seed. Labels carry over unchanged — corruptions perturb pixels, never
/// geometry.
pub fn corrupt_set(
    clean: &[Sample],
    cond: Condition,
    base_seed: u64,
    stream_index: usize,
) -> Result<Vec<Sample>, Error> {
    let mut data = Vec::with_capacity(clean.len());
    for (ii, sample) in clean.iter().enumerate() {
        let seed = corruption_seed(base_seed, stream_index, ii);
        let image = corrupt(&sample.image, cond.kind, cond.severity, seed)?;
        data.push(Sample { image, boxes: sample.boxes.clone() });
    }
    Ok(data)
}

/// Builds the target suite: one clean scene set drawn from the stream seed,
/// then each condition applied to those same scenes. Sharing the underlying
/// scenes across conditions means quality differences between columns come
/// from the corruption, not from easier or harder object layouts.
pub fn build_target_sets(cfg: &ExperimentConfig) -> Result<Vec<TargetSet>, Error> {
    cfg.validate()?;
    let mut scene = cfg.scene.clone();
    scene.seed = cfg.stream.target_seed;
    let clean = generate_source(&scene, cfg.stream.images_per_condition)?;

    let mut sets = Vec::with_capacity(cfg.stream.conditions.len());
    for (ci, cond) in cfg.stream.conditions.iter().enumerate() {
        let data = corrupt_set(&clean, *cond, cfg.stream.target_seed, ci)?;
        sets.push(TargetSet { name: cond.to_string(), data });
    }
    Ok(sets)
}

/// Everything one pass over the stream leaves behind.
pub struct RunArtifacts {
    /// Detection quality per (round, condition) plus the derived averages.
    pub summary: SummaryTable,
    /// Compute totals against the never-pruned baseline.
    pub ledger: FlopsLedger,
    /// One log row per batch, in stream order.
    pub rows: Vec<BatchRow>,
    /// Digest of the considered scaling factors captured *before* each batch.
    /// Re-running the stream must reproduce this sequence prefix-for-prefix;
    /// a later batch influencing an earlier digest would mean the protocol
    /// peeked ahead.
    pub gamma_digests: Vec<u64>,
}

/// Order-sensitive digest of the considered scaling factors (FNV-1a over the
/// raw bits). Equal digests across runs is the cheap stand-in for "the
/// network was bit-identical at this point in the stream".
pub fn gamma_digest(state: &NetworkState) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for l in 0..crate::detector::CONSIDERED_BN.len() {
        for &g in state.considered_gamma(l) {
            h ^= g.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn stack_images(chunk: &[Sample]) -> Result<Tensor4, Error> {
    let s = chunk[0].image.shape();
    let mut data = Vec::with_capacity(chunk.len() * s.c * s.h * s.w);
    for sample in chunk {
        data.extend_from_slice(sample.image.data());
    }
    Tensor4::new(Shape4::new(chunk.len(), s.c, s.h, s.w), data)
}

/// Runs the continual stream on `state`, mutating it in place.
///
/// With `dry_run` false each batch goes through the full adaptation cycle and
/// the log rows carry its losses, mask ratio, and both compute directions.
/// With `dry_run` true the network is only evaluated — unmasked forward
/// passes, zero losses, zero backward compute — which is the no-adaptation
/// reference the adapted run is judged against. Either way detections are
/// taken from the stream passes themselves, so every prediction for batch `i`
/// predates the update batch `i` triggers.
///
/// `writer` receives each row as soon as the batch finishes; a run killed
/// mid-stream leaves a valid log of everything it completed.
pub fn run_continual(
    state: &mut NetworkState,
    stats: &SourceStats,
    cfg: &ExperimentConfig,
    targets: &[TargetSet],
    mut writer: Option<&mut MetricsWriter>,
    dry_run: bool,
) -> Result<RunArtifacts, Error> {
    if state.spec != cfg.network {
        return Err(Error::Config(
            "checkpoint was built for a different network layout than the configured one".into(),
        ));
    }
    let spec = cfg.network.clone();
    let identity = ChannelMask::all_alive(&spec.considered_channels());
    let gamma_ids = gamma_param_ids();

    let mut adapt = AdaptState::new(stats, &cfg.adapt);
    let mut rows: Vec<BatchRow> = Vec::new();
    let mut cells: Vec<SummaryCell> = Vec::new();
    let mut costs: Vec<BatchCost> = Vec::new();
    let mut digests: Vec<u64> = Vec::new();

    for round in 0..cfg.stream.rounds {
        for target in targets {
            let mut detections: Vec<Vec<Detection>> = Vec::with_capacity(target.data.len());
            let ground_truth: Vec<Vec<GtBox>> =
                target.data.iter().map(|s| s.boxes.clone()).collect();
            let mut block_fwd = 0u64;
            let mut block_bwd = 0u64;
            let mut block_batches = 0usize;

            for (batch, chunk) in target.data.chunks(cfg.stream.batch_size).enumerate() {
                digests.push(gamma_digest(state));
                let images = stack_images(chunk)?;

                let row = if dry_run {
                    let mut tape = Tape::new();
                    let out = state.forward(&mut tape, &images, None, TrainScope::None)?;
                    let rois = out.rois.len();
                    detections.extend(out.detections);
                    let fwd = forward_flops(&spec, &identity, chunk.len(), rois, 1).fwd_total;
                    costs.push(BatchCost {
                        round,
                        images: chunk.len(),
                        rois,
                        mask: identity.clone(),
                        backward: false,
                    });
                    BatchRow {
                        round,
                        condition: target.name.clone(),
                        batch,
                        images: chunk.len(),
                        rois,
                        picked: 0,
                        ratio: 0.0,
                        penalty_active: false,
                        image_loss: 0.0,
                        instance_loss: 0.0,
                        sparsity_loss: 0.0,
                        total_loss: 0.0,
                        fwd_flops: fwd,
                        bwd_flops: 0,
                        reactivated: 0,
                        skipped: false,
                    }
                } else {
                    let outcome = adapt_batch(state, &mut adapt, stats, &images, &cfg.adapt)?;
                    if log::log_enabled!(log::Level::Debug) {
                        let digest: Vec<String> = outcome
                            .omega
                            .iter()
                            .enumerate()
                            .map(|(l, w)| {
                                let max = w.iter().cloned().fold(0.0, f64::max);
                                let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
                                format!("l{l} mean {mean:.3} max {max:.3}")
                            })
                            .collect();
                        log::debug!(
                            "sensitivity r{round} {} b{batch}: {}",
                            target.name,
                            digest.join(" | ")
                        );
                    }
                    let fwd =
                        forward_flops(&spec, &outcome.mask, chunk.len(), outcome.rois, 1).fwd_total;
                    // A skipped batch abandons the tape before the backward
                    // sweep runs, so it is charged nothing in that direction.
                    let bwd = if outcome.skipped {
                        0
                    } else {
                        backward_flops(&spec, &outcome.mask, &gamma_ids, chunk.len(), outcome.rois, 1)
                            .bwd_total()
                    };
                    costs.push(BatchCost {
                        round,
                        images: chunk.len(),
                        rois: outcome.rois,
                        mask: outcome.mask.clone(),
                        backward: !outcome.skipped,
                    });
                    let row = BatchRow {
                        round,
                        condition: target.name.clone(),
                        batch,
                        images: chunk.len(),
                        rois: outcome.rois,
                        picked: outcome.picked_foreground,
                        ratio: outcome.report.ratio,
                        penalty_active: outcome.report.penalty_active,
                        image_loss: outcome.report.image,
                        instance_loss: outcome.report.instance,
                        sparsity_loss: outcome.report.sparsity,
                        total_loss: outcome.report.total,
                        fwd_flops: fwd,
                        bwd_flops: bwd,
                        reactivated: outcome.revived.len(),
                        skipped: outcome.skipped,
                    };
                    detections.extend(outcome.detections);
                    row
                };

                block_fwd += row.fwd_flops;
                block_bwd += row.bwd_flops;
                block_batches += 1;
                if let Some(w) = writer.as_deref_mut() {
                    w.append(&row)?;
                }
                rows.push(row);
            }

            let quality = evaluate_map50(&detections, &ground_truth, spec.classes);
            let end_ratio = if dry_run {
                0.0
            } else {
                derive_mask(state, cfg.adapt.prune.threshold).ratio()
            };
            cells.push(SummaryCell {
                round,
                condition: target.name.clone(),
                map_percent: quality.percent(),
                batches: block_batches,
                end_ratio,
                fwd_flops: block_fwd,
                bwd_flops: block_bwd,
            });
        }
    }

    let trainable: &[u32] = if dry_run { &[] } else { &gamma_ids };
    let ledger = run_flops_ledger(&spec, trainable, &costs, 1);
    Ok(RunArtifacts { summary: SummaryTable::compute(cells), ledger, rows, gamma_digests: digests })
}

/// The no-adaptation reference: the source checkpoint evaluated over the same
/// stream with nothing trainable and nothing pruned. Works on a copy, so the
/// caller's checkpoint is untouched.
pub fn direct_test(
    state: &NetworkState,
    stats: &SourceStats,
    cfg: &ExperimentConfig,
    targets: &[TargetSet],
    writer: Option<&mut MetricsWriter>,
) -> Result<RunArtifacts, Error> {
    let mut frozen = state.clone();
    run_continual(&mut frozen, stats, cfg, targets, writer, true)
}
