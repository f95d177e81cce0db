//! Batch sampling, learning-rate schedule and the two training loops.
//!
//! Both loops run one graph per image: a small loss graph over the pooled
//! features yields per-feature gradients, which are then pushed back through
//! each image graph and accumulated into the parameter tensors.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::data::PersonRecord;
use crate::error::{AmdError, Result};
use crate::evaluation::{reid_eval, ItemKey};
use crate::graph::{Graph, Var};
use crate::interpreter::{attribute_features, Interpreter};
use crate::losses::{pairwise_xor, total_loss_graph, LossConfig};
use crate::ops;
use crate::scalar::{count, Real};
use crate::target::{pair_distance, Embedder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub p: usize,
    pub s: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            p: 6,
            s: 4,
            epochs: 30,
            warmup_epochs: 10,
            base_lr: 1e-4,
            warmup_start_lr: 1e-6,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.s < 2 {
            return Err(AmdError::Config(format!("batch needs P ≥ 2 and S ≥ 2, got {}×{}", self.p, self.s)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(AmdError::Config(format!(
                "warmup epochs {} exceed epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        let lr_ok = |v: f64| v.is_finite() && v > 0.0;
        if !lr_ok(self.base_lr) || !lr_ok(self.warmup_start_lr) {
            return Err(AmdError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Batches per epoch so that one epoch visits about every record once.
    pub fn batches_per_epoch(&self, n_records: usize) -> usize {
        n_records.div_ceil(self.p * self.s).max(1)
    }
}

/// Linear warmup from `warmup_start_lr` to `base_lr`, constant afterwards.
pub fn warmup_lr(epoch: usize, schedule: &TrainSchedule) -> Result<f64> {
    if epoch >= schedule.epochs {
        return Err(AmdError::Usage(format!(
            "epoch {} outside 0..{}",
            epoch, schedule.epochs
        )));
    }
    if epoch >= schedule.warmup_epochs {
        return Ok(schedule.base_lr);
    }
    let frac = epoch as f64 / schedule.warmup_epochs as f64;
    Ok(schedule.warmup_start_lr + frac * (schedule.base_lr - schedule.warmup_start_lr))
}

fn group_by_id(records: &[PersonRecord]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_id.entry(r.id).or_default().push(i);
    }
    by_id
}

/// Draws `p` distinct identities and `s` records of each. Identities with
/// fewer than `s` records are sampled with replacement. Returns indices into
/// `records`, grouped by identity.
pub fn pk_sample(records: &[PersonRecord], p: usize, s: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let by_id = group_by_id(records);
    if by_id.len() < p {
        return Err(AmdError::Config(format!(
            "batch needs {} identities, only {} available",
            p,
            by_id.len()
        )));
    }
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    let mut out = Vec::with_capacity(p * s);
    for pick in index::sample(rng, ids.len(), p).into_iter() {
        let pool = ids[pick];
        if pool.len() >= s {
            out.extend(index::sample(rng, pool.len(), s).into_iter().map(|i| pool[i]));
        } else {
            out.extend((0..s).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    Ok(out)
}

/// Unordered distinct index pairs `(a, b)` with `a < b`.
pub fn enumerate_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

/// Pushes per-node upstream gradients through `g` and adds the resulting
/// parameter gradients into `tensors` (same order as `params`).
fn accumulate<'a, T: Real>(
    g: &mut Graph<T>,
    seeds: &[(Var, &[T])],
    params: &[Var],
    tensors: impl IntoIterator<Item = &'a mut Tensor<T>>,
) -> Result<()> {
    g.backward_seeded(seeds)?;
    for (&v, t) in params.iter().zip(tensors) {
        if let Some(grad) = g.grad(v) {
            t.accumulate_grad(grad)?;
        }
    }
    Ok(())
}

// ---- target embedder ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTrainConfig {
    pub p: usize,
    pub s: usize,
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    /// Weight of the `(‖f‖ − 1)²` penalty that keeps raw feature norms
    /// consistent across images.
    pub norm_weight: f64,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        TargetTrainConfig {
            p: 8,
            s: 4,
            epochs: 20,
            lr: 1e-3,
            margin: 0.3,
            norm_weight: 1.0,
            seed: 0,
        }
    }
}

impl TargetTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.s < 2 {
            return Err(AmdError::Config(format!("batch needs P ≥ 2 and S ≥ 2, got {}×{}", self.p, self.s)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(AmdError::Config("learning rate must be positive".into()));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(AmdError::Config("margin must be non-negative".into()));
        }
        if !(self.norm_weight.is_finite() && self.norm_weight >= 0.0) {
            return Err(AmdError::Config("norm weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub first_batch_loss: f64,
    pub last_batch_loss: f64,
    pub probe_rank1: Option<f64>,
}

/// Held-out query and gallery used to report Rank-1 after every epoch.
pub type Probe<'a> = (&'a [PersonRecord], &'a [PersonRecord]);

/// Rank-1 of `embedder` on a query/gallery probe, or `None` if undefined.
pub fn probe_rank1<T: Real>(embedder: &Embedder<T>, probe: Probe<'_>) -> Result<Option<f64>> {
    let embed = |rs: &[PersonRecord]| -> Result<Vec<Tensor<T>>> {
        rs.iter().map(|r| Ok(embedder.embed(&r.image::<T>())?.feature)).collect()
    };
    let (q, g) = probe;
    let fq = embed(q)?;
    let fg = embed(g)?;
    let dist: Vec<Vec<f64>> = fq
        .iter()
        .map(|a| fg.iter().map(|b| pair_distance(a, b).map(|d| d.as_f64())).collect())
        .collect::<Result<_>>()?;
    let qk: Vec<ItemKey> = q.iter().map(ItemKey::from).collect();
    let gk: Vec<ItemKey> = g.iter().map(ItemKey::from).collect();
    match reid_eval(&qk, &gk, &dist) {
        Ok(m) => Ok(Some(m.rank1)),
        Err(AmdError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Batch-hard triplet loss over normalized distances; records gradients
/// on the feature leaves of `g`.
fn batch_hard_triplet<T: Real>(g: &mut Graph<T>, feats: &[Var], ids: &[usize], margin: T) -> Result<Var> {
    let n = feats.len();
    let mut dist = vec![vec![T::zero(); n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = ops::normalized_distance(g.value(feats[a]).data(), g.value(feats[b]).data())?;
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    let mut terms = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for b in 0..n {
            if b == a {
                continue;
            }
            if ids[b] == ids[a] {
                if pos.map_or(true, |p| dist[a][b] > dist[a][p]) {
                    pos = Some(b);
                }
            } else if neg.map_or(true, |q| dist[a][b] < dist[a][q]) {
                neg = Some(b);
            }
        }
        let (Some(p), Some(q)) = (pos, neg) else { continue };
        let dp = g.normalized_distance(feats[a], feats[p])?;
        let dn = g.normalized_distance(feats[a], feats[q])?;
        let gap = g.sub(dp, dn)?;
        let gap = g.add_const(gap, margin);
        terms.push(g.relu(gap));
    }
    if terms.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    g.mean_list(&terms)
}

/// Mean of `(‖f‖ − 1)²` over the batch.
fn norm_penalty<T: Real>(g: &mut Graph<T>, feats: &[Var]) -> Result<Var> {
    let terms = feats
        .iter()
        .map(|&f| {
            let origin = g.constant(&Tensor::zeros(g.value(f).shape()));
            let n = g.euclidean_distance(f, origin)?;
            let e = g.add_const(n, -T::one());
            g.mul(e, e)
        })
        .collect::<Result<Vec<_>>>()?;
    g.mean_list(&terms)
}

/// Trains the embedder with batch-hard triplet loss and Adam, then
/// calibrates the feature scale on the training images and freezes it.
pub fn train_target<T: Real>(
    embedder: &mut Embedder<T>,
    train: &[PersonRecord],
    probe: Option<Probe<'_>>,
    config: &TargetTrainConfig,
) -> Result<Vec<TargetEpochLog>> {
    config.validate()?;
    if embedder.is_frozen() {
        return Err(AmdError::State("embedder is already frozen".into()));
    }
    let by_id = group_by_id(train);
    if by_id.len() < 2 || by_id.values().filter(|v| v.len() >= 2).count() < 2 {
        return Err(AmdError::Config("target training needs 2 identities with 2 images each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(embedder.tensors());
    let batches = train.len().div_ceil(config.p * config.s).max(1);
    let images: Vec<Tensor<T>> = train.iter().map(|r| r.image()).collect();
    let margin = T::of(config.margin);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut losses = Vec::with_capacity(batches);
        for _ in 0..batches {
            let batch = pk_sample(train, config.p, config.s, &mut rng)?;
            let mut graphs = Vec::with_capacity(batch.len());
            for &i in &batch {
                let mut g = Graph::new();
                let x = g.constant(&images[i]);
                let nodes = embedder.forward(&mut g, x)?;
                graphs.push((g, nodes));
            }
            let mut lg = Graph::new();
            let feats: Vec<Var> = graphs.iter().map(|(g, n)| lg.param(g.value(n.feature))).collect();
            let ids: Vec<usize> = batch.iter().map(|&i| train[i].id).collect();
            let mut loss = batch_hard_triplet(&mut lg, &feats, &ids, margin)?;
            if config.norm_weight > 0.0 {
                let pen = norm_penalty(&mut lg, &feats)?;
                let pen = lg.scale(pen, T::of(config.norm_weight));
                loss = lg.add(loss, pen)?;
            }
            lg.backward(loss)?;
            losses.push(lg.item(loss).as_f64());
            for ((g, nodes), &f) in graphs.iter_mut().zip(&feats) {
                let Some(seed) = lg.grad(f) else { continue };
                accumulate(g, &[(nodes.feature, seed)], &nodes.params, embedder.tensors_mut())?;
            }
            adam.step(embedder.tensors_mut(), T::of(config.lr))?;
        }
        let probe_rank1 = match probe {
            Some(pr) => probe_rank1(embedder, pr)?,
            None => None,
        };
        log.push(TargetEpochLog {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            first_batch_loss: losses[0],
            last_batch_loss: *losses.last().unwrap(),
            probe_rank1,
        });
    }
    embedder.calibrate_feature_scale(&images)?;
    embedder.freeze();
    Ok(log)
}

// ---- interpreter ----------------------------------------------------------

/// Frozen-target activations of one training image.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedImage<T: Real = f64> {
    pub shared: Tensor<T>,
    pub feature_map: Tensor<T>,
    pub feature: Tensor<T>,
}

pub fn cache_target<T: Real>(interp: &Interpreter<T>, records: &[PersonRecord]) -> Result<Vec<CachedImage<T>>> {
    records
        .iter()
        .map(|r| {
            let b = interp.target().embed(&r.image())?;
            Ok(CachedImage {
                shared: interp.shared_activation(&b).clone(),
                feature_map: b.feature_map,
                feature: b.feature,
            })
        })
        .collect()
}

/// Mean loss terms and skip counts of one interpreter epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterpreterEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_d: f64,
    pub l_p1: Option<f64>,
    pub l_p2: Option<f64>,
    pub total: f64,
    pub valid_pairs: usize,
    pub identical_pairs: usize,
    pub degenerate_pairs: usize,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterpreterTrainLog {
    pub epochs: Vec<InterpreterEpochLog>,
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct Running {
    l_d: f64,
    l_p1: (f64, usize),
    l_p2: (f64, usize),
    total: f64,
    n: usize,
}

impl Running {
    fn mean(v: (f64, usize)) -> Option<f64> {
        (v.1 > 0).then(|| v.0 / v.1 as f64)
    }
}

/// Distills the frozen target's distances into the interpreter.
pub fn train_interpreter<T: Real>(
    interp: &mut Interpreter<T>,
    train: &[PersonRecord],
    schedule: &TrainSchedule,
    loss: &LossConfig,
) -> Result<InterpreterTrainLog> {
    schedule.validate()?;
    loss.validate()?;
    let cache = cache_target(interp, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(interp.tensors());
    let batches = schedule.batches_per_epoch(train.len());
    let m = interp.m();
    let p = interp.target().gmp_power();
    let mut log = InterpreterTrainLog::default();
    for epoch in 0..schedule.epochs {
        let lr = warmup_lr(epoch, schedule)?;
        let mut entry = InterpreterEpochLog {
            epoch,
            lr,
            ..Default::default()
        };
        let mut run = Running::default();
        for batch_no in 0..batches {
            let batch = pk_sample(train, schedule.p, schedule.s, &mut rng)?;
            // one interpreter pass per image
            let mut graphs = Vec::with_capacity(batch.len());
            for &i in &batch {
                let mut g = Graph::new();
                let shared = g.constant(&cache[i].shared);
                let nodes = interp.forward_from_shared(&mut g, shared, true)?;
                let fmap = g.constant(&cache[i].feature_map);
                let fk = attribute_features(&mut g, fmap, nodes.aams, m, p)?;
                graphs.push((g, nodes.params, fk));
            }
            let mut lg = Graph::new();
            let leaves: Vec<Vec<Var>> = graphs
                .iter()
                .map(|(g, _, fk)| fk.iter().map(|&v| lg.param(g.value(v))).collect())
                .collect();
            let mut totals = Vec::new();
            for (a, b) in enumerate_pairs(batch.len()) {
                let (ia, ib) = (batch[a], batch[b]);
                if ia == ib {
                    entry.identical_pairs += 1;
                    continue;
                }
                let d = pair_distance(&cache[ia].feature, &cache[ib].feature)?;
                let comps: Vec<Var> = (0..m)
                    .map(|k| lg.euclidean_distance(leaves[a][k], leaves[b][k]))
                    .collect::<Result<_>>()?;
                let d_hat: T = comps.iter().map(|&c| lg.item(c)).sum();
                if !(d_hat > T::zero()) {
                    entry.degenerate_pairs += 1;
                    continue;
                }
                let (a_ij, _) = pairwise_xor(&train[ia].attributes, &train[ib].attributes)?;
                let (total, br) = total_loss_graph(&mut lg, d, &comps, &a_ij, loss)?;
                run.l_d += br.l_d;
                run.total += br.total;
                run.n += 1;
                if let Some(v) = br.l_p1 {
                    run.l_p1.0 += v;
                    run.l_p1.1 += 1;
                }
                if let Some(v) = br.l_p2 {
                    run.l_p2.0 += v;
                    run.l_p2.1 += 1;
                }
                totals.push(total);
            }
            if totals.is_empty() {
                entry.skipped_batches += 1;
                log.warnings.push(format!("epoch {} batch {}: no valid pairs, skipped", epoch, batch_no));
                continue;
            }
            entry.valid_pairs += totals.len();
            let batch_loss = lg.mean_list(&totals)?;
            lg.backward(batch_loss)?;
            for ((g, params, fk), lv) in graphs.iter_mut().zip(&leaves) {
                let seeds: Vec<(Var, &[T])> = fk
                    .iter()
                    .zip(lv)
                    .filter_map(|(&v, &l)| lg.grad(l).map(|gr| (v, gr)))
                    .collect();
                accumulate(g, &seeds, params, interp.tensors_mut())?;
            }
            adam.step(interp.tensors_mut(), T::of(lr))?;
        }
        if run.n > 0 {
            let n = count::<f64>(run.n);
            entry.l_d = run.l_d / n;
            entry.total = run.total / n;
        }
        entry.l_p1 = Running::mean(run.l_p1);
        entry.l_p2 = Running::mean(run.l_p2);
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, AttributeSchema};
    use crate::interpreter::InterpreterConfig;
    use crate::target::EmbedderConfig;
    use std::sync::Arc;

    fn records(n_ids: usize, per_id: usize) -> Vec<PersonRecord> {
        generate_dataset(&AttributeSchema::desk_scale(), n_ids, per_id, 2, 3).unwrap()
    }

    #[test]
    fn pk_batch_shape() {
        let rs = records(10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_sample(&rs, 6, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 24);
        let mut ids: Vec<usize> = b.iter().map(|&i| rs[i].id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        let again = pk_sample(&rs, 6, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn pk_all_ids_and_replacement() {
        let rs = records(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = pk_sample(&rs, 4, 4, &mut rng).unwrap();
        let mut ids: Vec<usize> = b.iter().map(|&i| rs[i].id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        // 2 images per id but 4 draws: some index repeats
        let mut idx = b.clone();
        idx.sort();
        idx.dedup();
        assert!(idx.len() < b.len());
        assert!(matches!(pk_sample(&rs, 5, 2, &mut rng), Err(AmdError::Config(_))));
    }

    #[test]
    fn pair_counts() {
        assert_eq!(enumerate_pairs(24).len(), 276);
        assert_eq!(enumerate_pairs(2), vec![(0, 1)]);
        assert!(enumerate_pairs(7).iter().all(|(a, b)| a < b));
    }

    #[test]
    fn warmup_examples() {
        let s = TrainSchedule::default();
        assert_eq!(warmup_lr(0, &s).unwrap(), 1e-6);
        assert_eq!(warmup_lr(10, &s).unwrap(), 1e-4);
        assert_eq!(warmup_lr(29, &s).unwrap(), 1e-4);
        assert!((warmup_lr(5, &s).unwrap() - 5.05e-5).abs() < 1e-18);
        assert!(matches!(warmup_lr(30, &s), Err(AmdError::Usage(_))));
    }

    #[test]
    fn schedule_validation() {
        let bad = TrainSchedule {
            p: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainSchedule {
            warmup_epochs: 40,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn target_batch_overflow_is_config_error() {
        let rs = records(4, 3);
        let mut e = Embedder::<f64>::new(EmbedderConfig::default(), 0).unwrap();
        let cfg = TargetTrainConfig {
            p: 6,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train_target(&mut e, &rs, None, &cfg), Err(AmdError::Config(_))));
    }

    #[test]
    fn toy_interpreter_epoch_keeps_target_fixed() {
        let rs = records(6, 4);
        let mut e = Embedder::<f64>::new(EmbedderConfig::default(), 4).unwrap();
        let imgs: Vec<Tensor<f64>> = rs.iter().map(|r| r.image()).collect();
        e.calibrate_feature_scale(&imgs).unwrap();
        e.freeze();
        let target = Arc::new(e);
        let before = target.named_tensors();
        let mut interp = Interpreter::attach(target.clone(), InterpreterConfig::new(8)).unwrap();
        let sched = TrainSchedule {
            epochs: 1,
            warmup_epochs: 0,
            ..Default::default()
        };
        let log = train_interpreter(&mut interp, &rs, &sched, &LossConfig::default()).unwrap();
        assert!(log.epochs[0].total.is_finite());
        assert!(log.epochs[0].valid_pairs > 0);
        assert_eq!(before, interp.target().named_tensors());
    }
}
