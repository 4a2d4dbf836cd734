//! Masked global alignment: a contrastive objective that tolerates missing
//! modalities.
//!
//! For an anchor `z_{i,k}` (patient `k`, modality `i`) the positive is the
//! normalized sum of the patient's *other* active modalities, the
//! complementary centroid `c_{i,k}`. Negatives are the other patients'
//! complementary centroids for the same anchor modality, falling back to their
//! normalized sum over all active modalities when modality `i` is their only
//! one. Only patients with at least two active modalities serve as anchors.

use std::io::Write;

use mga_nn::{norm2, Adam, Graph, Tensor, Var, L2_EPS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderBank, PresenceMask, StayEvents, StayView};
use crate::error::{CoreError, Result};

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v).max(L2_EPS);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn masked_sum<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for v in vectors {
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    acc
}

/// `c_{i,k}`: normalized sum of the patient's active modalities other than
/// `anchor`. `None` when no other modality is active.
pub fn complementary_centroid(z: &[Vec<f64>], mask: &[bool], anchor: usize) -> Option<Vec<f64>> {
    let dim = z.first()?.len();
    let others = (0..z.len()).filter(|&j| j != anchor && mask[j]).collect::<Vec<_>>();
    if others.is_empty() {
        return None;
    }
    Some(normalized(masked_sum(others.iter().map(|&j| z[j].as_slice()), dim)))
}

/// `z̄_k`: normalized sum over all active modalities.
pub fn global_representation(z: &[Vec<f64>], mask: &[bool]) -> Result<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return Err(CoreError::data("global representation of a patient with no active modality"));
    }
    let dim = z[0].len();
    let active = (0..z.len()).filter(|&j| mask[j]);
    Ok(normalized(masked_sum(active.map(|j| z[j].as_slice()), dim)))
}

/// The target patient `m` contributes for anchor modality `anchor`: its
/// complementary centroid when one exists, else its global representation.
pub fn negative_target(z: &[Vec<f64>], mask: &[bool], anchor: usize) -> Result<Vec<f64>> {
    match complementary_centroid(z, mask, anchor) {
        Some(c) => Ok(c),
        None => global_representation(z, mask),
    }
}

/// Indices `k` with `M_{i,k} = 1` and `C_k ≥ 2`.
pub fn valid_anchors(mask: &PresenceMask, modality: usize) -> Vec<usize> {
    let counts = mask.counts();
    (0..mask.n_patients())
        .filter(|&k| mask.get(k, modality) && counts[k] >= 2)
        .collect()
}

/// Recorded objective of one batch.
#[derive(Debug)]
pub struct InfoNce {
    pub loss: Var,
    /// `L_i` per modality; `None` where `B_i` is empty.
    pub per_modality: Vec<Option<f64>>,
}

/// Records the masked InfoNCE loss on `g`.
///
/// `z` is `[N·M, D]` with row `k·M + i` holding patient `k`'s modality `i`
/// (see [`EncoderBank::embed_graph`]); `log_tau` is a one-element node.
/// Patients with no active modality take no part. Returns `None`, meaning the
/// batch must be skipped, when fewer than two patients are active or no
/// modality has a valid anchor.
pub fn masked_infonce_graph(g: &mut Graph, z: Var, mask: &PresenceMask, log_tau: Var) -> Result<Option<InfoNce>> {
    let (n, m) = (mask.n_patients(), mask.n_modalities());
    if g.value(z).rows() != n * m {
        return Err(CoreError::data(format!(
            "embedding rows {} do not match {n} patients x {m} modalities",
            g.value(z).rows()
        )));
    }
    let counts = mask.counts();
    let active: Vec<usize> = (0..n).filter(|&k| counts[k] >= 1).collect();
    if active.len() < 2 {
        return Ok(None);
    }
    let neg_log_tau = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg_log_tau)?;
    let mut per_modality = vec![None; m];
    let mut terms = Vec::new();
    for (i, slot) in per_modality.iter_mut().enumerate() {
        let anchors = valid_anchors(mask, i);
        if anchors.is_empty() {
            continue;
        }
        let groups: Vec<Vec<usize>> = active
            .iter()
            .map(|&p| {
                let others: Vec<usize> = (0..m).filter(|&j| j != i && mask.get(p, j)).map(|j| p * m + j).collect();
                if others.is_empty() {
                    (0..m).filter(|&j| mask.get(p, j)).map(|j| p * m + j).collect()
                } else {
                    others
                }
            })
            .collect();
        let targets = g.gather_sum(z, groups)?;
        let targets = g.l2_normalize_rows(targets, L2_EPS)?;
        let rows: Vec<usize> = anchors.iter().map(|&k| k * m + i).collect();
        let a = g.gather_rows(z, &rows)?;
        let sims = g.matmul_nt(a, targets)?;
        let logits = g.scale_by(sims, inv_tau)?;
        let cols: Vec<usize> = anchors
            .iter()
            .map(|k| active.binary_search(k).expect("anchors are active"))
            .collect();
        let li = g.cross_entropy(logits, &cols, None)?;
        *slot = Some(g.scalar(li));
        terms.push(li);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, 1.0 / terms.len() as f64)?;
    Ok(Some(InfoNce { loss, per_modality }))
}

/// Value-only masked InfoNCE over explicit embeddings `z[k][i]`.
pub fn masked_infonce(z: &[Vec<Vec<f64>>], mask: &PresenceMask, tau: f64) -> Result<Option<(f64, Vec<Option<f64>>)>> {
    let rows: Vec<Vec<f64>> = z.iter().flatten().cloned().collect();
    let mut g = Graph::new();
    let zv = g.constant(Tensor::from_rows(&rows)?);
    let lt = g.constant(Tensor::vector(vec![tau.ln()]));
    Ok(masked_infonce_graph(&mut g, zv, mask, lt)?.map(|r| (g.scalar(r.loss), r.per_modality)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr_grid: Vec<f64>,
    pub weight_decay_grid: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub modality_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr_grid: vec![1e-3, 1e-4, 1e-5, 1e-6],
            weight_decay_grid: vec![0.005, 0.01, 0.05],
            max_epochs: 100,
            patience: 10,
            modality_dropout: 0.15,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CoreError::config("pretrain.batch_size must be >= 2"));
        }
        if self.lr_grid.is_empty() || self.weight_decay_grid.is_empty() {
            return Err(CoreError::config("pretrain.lr_grid and pretrain.weight_decay_grid must be nonempty"));
        }
        if self.lr_grid.iter().any(|&v| v <= 0.0) || self.weight_decay_grid.iter().any(|&v| v < 0.0) {
            return Err(CoreError::config("learning rates must be positive and weight decays nonnegative"));
        }
        if self.max_epochs == 0 {
            return Err(CoreError::config("pretrain.max_epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.modality_dropout) {
            return Err(CoreError::config("pretrain.modality_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau: f64,
    pub per_modality: Vec<Option<f64>>,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub bank: EncoderBank,
    pub lr: f64,
    pub weight_decay: f64,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
    /// `(lr, weight_decay, best validation loss)` for every grid point.
    pub grid: Vec<(f64, f64, f64)>,
}

fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(size)
        .map(|s| s..(s + size).min(n))
        .filter(|r| r.len() >= 2)
        .collect()
}

/// Mean loss over evaluation-mode batches, using each stay's first events.
pub fn evaluate_loss(bank: &EncoderBank, views: &[StayView], batch_size: usize) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    for r in batches(views.len(), batch_size) {
        let batch = &views[r];
        let mask = PresenceMask::from_views(batch);
        let mut g = Graph::new();
        let z = bank.embed_graph(&mut g, batch, &mask, false, &mut rng)?;
        let lt = g.param(&bank.store, bank.log_tau_id());
        if let Some(out) = masked_infonce_graph(&mut g, z, &mask, lt)? {
            losses.push(g.scalar(out.loss));
        }
    }
    Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
}

fn numeric(e: CoreError) -> CoreError {
    match e {
        CoreError::Nn(mga_nn::NnError::NonFinite { op }) => {
            CoreError::Numeric(format!("non-finite value in {op} during pretraining"))
        }
        other => other,
    }
}

/// Trains one grid point from `init`, keeping the best-validation state.
fn train_once(
    init: &EncoderBank,
    train: &[StayEvents],
    val: &[StayView],
    cfg: &PretrainConfig,
    lr: f64,
    wd: f64,
    seed: u64,
) -> Result<(EncoderBank, f64, Vec<EpochLog>)> {
    let mut bank = init.clone();
    bank.unfreeze();
    let mut opt = Adam::new(&bank.store, lr, wd);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let m = bank.n_modalities();
    let mut best = (f64::INFINITY, bank.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
        let mut per = vec![(0.0, 0usize); m];
        for r in batches(order.len(), cfg.batch_size) {
            let views: Vec<StayView> = order[r].iter().map(|&k| train[k].random_view(&mut rng)).collect();
            let mask = PresenceMask::from_views(&views).dropout(cfg.modality_dropout, &mut rng);
            let mut g = Graph::new();
            let z = bank.embed_graph(&mut g, &views, &mask, true, &mut rng).map_err(numeric)?;
            let lt = g.param(&bank.store, bank.log_tau_id());
            let Some(out) = masked_infonce_graph(&mut g, z, &mask, lt).map_err(numeric)? else {
                skipped += 1;
                continue;
            };
            let grads = g.backward(out.loss)?;
            bank.store.zero_grad();
            g.accumulate_into(&grads, &mut bank.store);
            opt.step(&mut bank.store);
            bank.clamp_tau();
            if !bank.store.all_finite() {
                return Err(CoreError::Numeric(format!("parameters became non-finite in epoch {epoch}")));
            }
            sum += g.scalar(out.loss);
            n += 1;
            for (acc, v) in per.iter_mut().zip(&out.per_modality) {
                if let Some(v) = v {
                    acc.0 += v;
                    acc.1 += 1;
                }
            }
        }
        if n == 0 {
            return Err(CoreError::data(
                "no training batch had a valid anchor: every stay has fewer than two modalities",
            ));
        }
        let train_loss = sum / n as f64;
        let val_loss = match evaluate_loss(&bank, val, cfg.batch_size)? {
            Some(v) => v,
            None => {
                log::warn!("validation split has no valid anchors; early stopping on training loss");
                train_loss
            }
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            tau: bank.tau(),
            per_modality: per.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect(),
            skipped_batches: skipped,
        });
        log::debug!("pretrain lr={lr} wd={wd} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if val_loss < best.0 {
            best = (val_loss, bank.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, best.0, log))
}

/// Runs the learning-rate × weight-decay grid and keeps the run with the
/// lowest validation loss.
pub fn pretrain(
    init: &EncoderBank,
    train: &[StayEvents],
    val: &[StayEvents],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(CoreError::data("pretraining needs at least two training stays"));
    }
    let val_views: Vec<StayView> = val.iter().map(StayEvents::first_view).collect();
    let mut best: Option<PretrainOutcome> = None;
    let mut grid = Vec::new();
    for &lr in &cfg.lr_grid {
        for &wd in &cfg.weight_decay_grid {
            let (bank, val_loss, log) = train_once(init, train, &val_views, cfg, lr, wd, seed)?;
            log::info!("pretrain grid lr={lr} wd={wd}: best val loss {val_loss:.5}");
            grid.push((lr, wd, val_loss));
            if best.as_ref().map_or(true, |b| val_loss < b.best_val_loss) {
                best = Some(PretrainOutcome { bank, lr, weight_decay: wd, best_val_loss: val_loss, log, grid: Vec::new() });
            }
        }
    }
    let mut out = best.expect("grid is nonempty");
    out.grid = grid;
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Training log CSV: `epoch,train_loss,val_loss,tau,loss_<modality>...`.
pub fn write_log_csv<W: Write>(log: &[EpochLog], names: &[String], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into(), "tau".into()];
    header.extend(names.iter().map(|n| format!("loss_{n}")));
    wr.write_record(&header)?;
    for e in log {
        let mut row = vec![e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string(), e.tau.to_string()];
        row.extend(e.per_modality.iter().map(|v| fmt_opt(*v)));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}
