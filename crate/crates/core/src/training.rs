//! Triplet metric learning with batch-hard mining and Adam.

use std::collections::HashMap;
use std::path::Path;

use prfusion_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Model, SceneFrame};
use crate::params::Parameterized;
use crate::report::CsvTable;

/// `max(‖fa − fp‖ − ‖fa − fn‖ + margin, 0)`.
pub fn triplet_loss(fa: &Tensor, fp: &Tensor, fn_: &Tensor, margin: f64) -> Result<Tensor> {
    let dp = fa.sub(fp)?.norm();
    let dn = fa.sub(fn_)?.norm();
    Ok(dp.sub(&dn)?.add_scalar(margin).relu())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    /// Anchors with no positive or no negative in the batch.
    pub skipped: usize,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard mining: each anchor takes its farthest-in-descriptor positive
/// (within `rho` meters) and nearest-in-descriptor negative (beyond `rho_neg`).
/// Ties go to the lower index.
pub fn mine_triplets(descriptors: &[Vec<f64>], positions: &[[f64; 3]], rho: f64, rho_neg: f64) -> Result<TripletBatch> {
    if descriptors.len() != positions.len() {
        return Err(Error::Contract("descriptor and position counts differ".into()));
    }
    if rho_neg < rho {
        return Err(Error::Config(format!("negative radius {rho_neg} below positive radius {rho}")));
    }
    let n = descriptors.len();
    let mut out = TripletBatch::default();
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != a) {
            let geo = euclidean(&positions[a], &positions[j]);
            let d = euclidean(&descriptors[a], &descriptors[j]);
            if geo <= rho {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if geo > rho_neg && neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((q, _))) => out.triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative: q,
            }),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients currently stored on the
    /// parameters, replacing each with a fresh leaf.
    pub fn step(&mut self, params: &mut dyn Parameterized) -> Result<()> {
        self.t += 1;
        let (b1, b2, t) = (self.beta1, self.beta2, self.t);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut failure = None;
        params.visit_mut("", &mut |name, p| {
            let Some(mut g) = p.grad() else { return };
            let theta = p.data();
            for (gi, x) in g.iter_mut().zip(theta) {
                *gi += self.weight_decay * x;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut next = theta.to_vec();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                next[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            match Tensor::param(next, p.shape()) {
                Ok(t) => *p = t,
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub rho: f64,
    pub rho_neg: f64,
    pub flip_prob: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            margin: 0.2,
            rho: 25.0,
            rho_neg: 25.0,
            flip_prob: 0.0,
            jitter: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub skipped: usize,
}

/// Groups frames into connected components under the positive radius.
pub fn place_clusters(positions: &[[f64; 3]], rho: f64) -> Vec<Vec<usize>> {
    let n = positions.len();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters = Vec::new();
    for s in 0..n {
        if label[s].is_some() {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![s];
        label[s] = Some(id);
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in 0..n {
                if label[j].is_none() && euclidean(&positions[i], &positions[j]) <= rho {
                    label[j] = Some(id);
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

/// Horizontal image flip with the matching LiDAR mirror (y ↦ −y), plus
/// Gaussian point jitter.
pub fn augment(frame: &SceneFrame, flip: bool, jitter: f64, rng: &mut impl Rng) -> Result<SceneFrame> {
    let mut out = frame.clone();
    if flip {
        out.image = out.image.flip_horizontal();
        for p in &mut out.points {
            p[1] = -p[1];
        }
    }
    if jitter > 0.0 {
        let noise = Normal::new(0.0, jitter).map_err(|e| Error::Config(e.to_string()))?;
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStep {
    pub loss: f64,
    pub triplets: usize,
    pub skipped: usize,
}

/// Mines one batch and accumulates the loss gradient into the model's
/// parameters. Descriptors are first computed without a graph; each frame is
/// then replayed with a graph and seeded by its descriptor gradient, so only
/// one frame graph is alive at a time.
pub fn accumulate_batch_gradients(
    model: &Model,
    inputs: &[SceneFrame],
    positions: &[[f64; 3]],
    cfg: &TrainConfig,
) -> Result<BatchStep> {
    let values = prfusion_tensor::no_grad(|| {
        inputs.iter().map(|f| model.forward(f).map(|d| d.to_vec())).collect::<Result<Vec<_>>>()
    })?;
    let mined = mine_triplets(&values, positions, cfg.rho, cfg.rho_neg)?;
    if mined.triplets.is_empty() {
        return Ok(BatchStep {
            loss: 0.0,
            triplets: 0,
            skipped: mined.skipped,
        });
    }
    let leaves = values
        .iter()
        .map(|v| Tensor::param(v.clone(), &[v.len()]))
        .collect::<prfusion_tensor::Result<Vec<_>>>()?;
    let mut losses = Vec::with_capacity(mined.triplets.len());
    for t in &mined.triplets {
        losses.push(triplet_loss(&leaves[t.anchor], &leaves[t.positive], &leaves[t.negative], cfg.margin)?);
    }
    let loss = Tensor::concat_cols(&losses)?.mean();
    let value = loss.item();
    if !value.is_finite() {
        let norms: Vec<String> = model
            .named_params()
            .iter()
            .map(|(n, t)| format!("{n}={:.3e}", t.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect();
        log::error!("non-finite loss; parameter norms: {}", norms.join(" "));
        return Err(Error::Divergence(format!("loss became {value}")));
    }
    loss.backward()?;
    for (frame, leaf) in inputs.iter().zip(&leaves) {
        let Some(g) = leaf.grad().filter(|g| g.iter().any(|&v| v != 0.0)) else {
            continue;
        };
        let seed = Tensor::new(g, &[leaf.numel()])?;
        model.forward(frame)?.mul(&seed)?.sum().backward()?;
    }
    Ok(BatchStep {
        loss: value,
        triplets: mined.triplets.len(),
        skipped: mined.skipped,
    })
}

/// Trains in place. `on_epoch` sees each epoch's statistics as they land.
pub fn train(
    model: &mut Model,
    frames: &[SceneFrame],
    positions: &[[f64; 3]],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if frames.len() != positions.len() {
        return Err(Error::Contract("frame and position counts differ".into()));
    }
    if cfg.batch < 2 {
        return Err(Error::Config("batch must hold at least 2 frames".into()));
    }
    let clusters = place_clusters(positions, cfg.rho);
    if clusters.iter().all(|c| c.len() < 2) || clusters.len() < 2 {
        return Err(Error::Data("training set needs revisited places and at least two places".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = clusters.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = vec![Vec::new()];
        for cluster in order {
            let cur = batches.last_mut().expect("nonempty");
            if !cur.is_empty() && cur.len() + cluster.len() > cfg.batch {
                batches.push(cluster);
            } else {
                cur.extend(cluster);
            }
        }

        let (mut loss_sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
                inputs.push(augment(&frames[i], flip, cfg.jitter, &mut rng)?);
            }
            let pos: Vec<[f64; 3]> = batch.iter().map(|&i| positions[i]).collect();
            let step = accumulate_batch_gradients(model, &inputs, &pos, cfg).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("{m} at epoch {epoch}, batch {bi}")),
                other => other,
            })?;
            skipped += step.skipped;
            if step.triplets == 0 {
                continue;
            }
            adam.step(model)?;
            loss_sum += step.loss * step.triplets as f64;
            count += step.triplets;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: if count > 0 { loss_sum / count as f64 } else { 0.0 },
            skipped,
        };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(trace)
}

pub fn loss_table(trace: &[EpochStats]) -> CsvTable {
    let mut t = CsvTable::new(&["epoch", "mean_loss", "skipped_anchors"]);
    for s in trace {
        t.push(vec![s.epoch.to_string(), format!("{:.12e}", s.mean_loss), s.skipped.to_string()]);
    }
    t
}

pub fn write_loss_csv(path: &Path, trace: &[EpochStats], config_hash: &str) -> Result<()> {
    loss_table(trace).write(path, config_hash)
}
