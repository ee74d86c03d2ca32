//! One optimization step worth of computation: forward, loss, backward and
//! synchronous gradient reduction over simulated devices.

use alloc::vec::Vec;

use crate::anchors::MatchResult;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::loss::{
    multitask_loss_with, raw_normalizers, LossBreakdown, LossConfig, Normalizers,
};
use crate::model::{Detector, FlatHeads};
use crate::tensor::Tensor;

/// Loss and parameter gradients of `images` under fixed normalizers.
pub fn batch_gradients(
    model: &mut Detector,
    images: &Tensor,
    matches: &[MatchResult],
    cfg: &LossConfig,
    norm: Normalizers,
) -> Result<(LossBreakdown, Gradients)> {
    let mut graph = Graph::new(true);
    let nodes = model.forward(&mut graph, images)?;
    let k = model.spec().anchors_per_cell();
    let out = nodes.output(&graph, k);
    let preds: Vec<FlatHeads> = (0..images.batch()).map(|n| out.flatten(n)).collect();
    let loss = multitask_loss_with(&preds, matches, cfg, norm)?;
    let mut seed = out.zeros_like();
    for (n, g) in loss.grads.iter().enumerate() {
        seed.set_flat(n, g)?;
    }
    let mut grads = Gradients::zeros_like(model.params());
    graph.backward(model.params(), nodes.seeds(seed), &mut grads)?;
    Ok((loss.breakdown, grads))
}

/// Training-mode loss value without gradients.
pub fn batch_loss(
    model: &mut Detector,
    images: &Tensor,
    matches: &[MatchResult],
    cfg: &LossConfig,
    norm: Normalizers,
) -> Result<f64> {
    let mut graph = Graph::new(true);
    let nodes = model.forward(&mut graph, images)?;
    let out = nodes.output(&graph, model.spec().anchors_per_cell());
    let preds: Vec<FlatHeads> = (0..images.batch()).map(|n| out.flatten(n)).collect();
    Ok(multitask_loss_with(&preds, matches, cfg, norm)?.breakdown.total)
}

/// Contiguous per-device shards of a batch of `len` images.
pub fn shard_ranges(len: usize, devices: usize) -> Vec<core::ops::Range<usize>> {
    let devices = devices.clamp(1, len.max(1));
    let base = len / devices;
    let extra = len % devices;
    let mut start = 0;
    (0..devices)
        .map(|d| {
            let size = base + (d < extra) as usize;
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.cls += b.cls;
    acc.bbox += b.bbox;
    acc.landmark += b.landmark;
    acc.total += b.total;
    acc.positives += b.positives;
    acc.negatives += b.negatives;
}

/// Data-parallel step over `devices` simulated replicas. The normalizing
/// counts are all-reduced first, so each replica's loss is its exact share of
/// the batch objective; the replica gradients are then summed. Without
/// per-replica batch statistics this equals the single-device gradient of the
/// whole batch.
pub fn data_parallel_gradients(
    model: &mut Detector,
    images: &Tensor,
    matches: &[MatchResult],
    cfg: &LossConfig,
    devices: usize,
) -> Result<(LossBreakdown, Gradients)> {
    if devices == 0 {
        return Err(Error::Config("device count must be positive".into()));
    }
    if images.batch() != matches.len() {
        return Err(Error::Shape(alloc::format!(
            "{} images but {} target sets",
            images.batch(),
            matches.len()
        )));
    }
    let shards = shard_ranges(matches.len(), devices);
    let counts: Vec<Normalizers> = shards
        .iter()
        .map(|r| raw_normalizers(&matches[r.clone()], &cfg.ohem))
        .collect();
    let norm = Normalizers::combine(&counts);
    let mut total = Gradients::zeros_like(model.params());
    let mut breakdown = LossBreakdown {
        n_cls: norm.n_cls,
        n_reg: norm.n_reg,
        ..LossBreakdown::default()
    };
    for r in shards {
        let shard = images.slice_batch(r.start, r.end);
        let (b, g) = batch_gradients(model, &shard, &matches[r], cfg, norm)?;
        add_breakdown(&mut breakdown, &b);
        total.add_assign(&g);
    }
    Ok((breakdown, total))
}
