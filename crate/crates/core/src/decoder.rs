//! Small causal transformer over event timelines, with a task head read at
//! every prediction slot.
//!
//! Every sequence element (event embedding, missing token or the shared
//! prediction token) lives in the encoder latent space `R^D`. It is extended
//! with a scaled time-offset feature, projected to the model width, and given
//! a sinusoidal position encoding. Blocks are pre-norm attention + GELU MLP.

use std::io::Write;
use std::path::Path;

use mga_nn::{gaussian, glorot, Adam, Graph, NnError, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{StayLabels, LOS_MAX_HOURS, LOS_MIN_HOURS, N_PHENOTYPES};
use crate::encoder::EncoderBank;
use crate::error::{CoreError, Result};
use crate::metrics::sigmoid;
use crate::timeline::{EventTimeline, MAX_EVENTS};

pub const PHENOTYPE_WEIGHT_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Mortality,
    Phenotyping,
    Los,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Mortality, Task::Phenotyping, Task::Los];

    pub fn out_dim(self) -> usize {
        match self {
            Task::Phenotyping => N_PHENOTYPES,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mortality => "mortality",
            Task::Phenotyping => "phenotyping",
            Task::Los => "los",
        }
    }

    pub fn is_classification(self) -> bool {
        self != Task::Los
    }

    /// The per-stay target row: binary labels, or `ln(1 + hours)`.
    pub fn targets(self, labels: &StayLabels) -> Result<Vec<f64>> {
        Ok(match self {
            Task::Mortality => vec![f64::from(labels.mortality)],
            Task::Phenotyping => labels.phenotypes.iter().map(|&p| f64::from(p)).collect(),
            Task::Los => {
                if !(LOS_MIN_HOURS..=LOS_MAX_HOURS).contains(&labels.los_hours) {
                    return Err(CoreError::data(format!(
                        "length of stay {} h outside [{LOS_MIN_HOURS}, {LOS_MAX_HOURS}]",
                        labels.los_hours
                    )));
                }
                vec![labels.los_hours.ln_1p()]
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    #[serde(skip)]
    pub task: Task,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            task: Task::Mortality,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(CoreError::config("decoder sizes must be >= 1"));
        }
        if self.d_model % self.heads != 0 {
            return Err(CoreError::config(format!(
                "decoder.d_model {} is not divisible by decoder.heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config("decoder.dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub store: ParamStore,
    cfg: DecoderConfig,
    latent_dim: usize,
    proj: (ParamId, ParamId),
    predict: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

/// Scaled time feature: `ln(1 + hours) / ln(1 + 720)`, about 1 at the
/// longest stay.
pub fn time_feature(offset_minutes: f64) -> f64 {
    (offset_minutes / 60.0).ln_1p() / LOS_MAX_HOURS.ln_1p()
}

fn positional(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Graph nodes of one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[S, out]` head outputs at every slot of every timeline, in order.
    pub outputs: Var,
    /// Final attention node; its weights are per-timeline `[heads, T, T]`.
    pub last_attention: Var,
    /// Number of slots of each timeline.
    pub slots: Vec<usize>,
}

impl Decoder {
    pub fn new(latent_dim: usize, cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let f = d * cfg.ffn_mult;
        let lin = |store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            (store.add(format!("{name}.w"), glorot(rng, i, o)), store.add(format!("{name}.b"), Tensor::zeros(&[o])))
        };
        let ln = |store: &mut ParamStore, name: &str| {
            (
                store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
                store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            )
        };
        let proj = lin(&mut store, "proj", latent_dim + 1, d, &mut rng);
        let predict = store.add("predict_token", gaussian(&mut rng, &[1, latent_dim], (1.0 / latent_dim as f64).sqrt()));
        let mut blocks = Vec::new();
        for l in 0..cfg.layers {
            let p = |s: &str| format!("block{l}.{s}");
            blocks.push(Block {
                ln1: ln(&mut store, &p("ln1")),
                q: lin(&mut store, &p("q"), d, d, &mut rng),
                k: lin(&mut store, &p("k"), d, d, &mut rng),
                v: lin(&mut store, &p("v"), d, d, &mut rng),
                o: lin(&mut store, &p("o"), d, d, &mut rng),
                ln2: ln(&mut store, &p("ln2")),
                ff1: lin(&mut store, &p("ff1"), d, f, &mut rng),
                ff2: lin(&mut store, &p("ff2"), f, d, &mut rng),
            });
        }
        let ln_f = ln(&mut store, "ln_f");
        let head = lin(&mut store, "head", d, cfg.task.out_dim(), &mut rng);
        Ok(Self { store, cfg: cfg.clone(), latent_dim, proj, predict, blocks, ln_f, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn task(&self) -> Task {
        self.cfg.task
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn dense(&self, g: &mut Graph, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let w = g.param(&self.store, p.0);
        let b = g.param(&self.store, p.1);
        Ok(g.dense(x, w, b)?)
    }

    fn norm(&self, g: &mut Graph, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
        let ga = g.param(&self.store, p.0);
        let be = g.param(&self.store, p.1);
        Ok(g.layer_norm(x, ga, be, LAYER_NORM_EPS)?)
    }

    /// Builds the `[T, D]` latent-space inputs of a batch of timelines.
    fn inputs<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bank: &EncoderBank,
        timelines: &[&EventTimeline],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let m = bank.n_modalities();
        let use_cache = bank.is_frozen();
        let mut cached: Vec<(usize, &[f64])> = Vec::new();
        let mut encode: Vec<Vec<(usize, &[f64])>> = vec![Vec::new(); m];
        let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut predict_rows = Vec::new();
        let mut row = 0;
        for t in timelines {
            for e in &t.events {
                if e.modality >= m {
                    return Err(CoreError::data(format!("event modality {} outside the bank", e.modality)));
                }
                match (&e.embedding, e.masked) {
                    (_, true) => tokens[e.modality].push(row),
                    (Some(z), false) if use_cache => cached.push((row, z.as_slice())),
                    _ => encode[e.modality].push((row, e.features.as_slice())),
                }
                predict_rows.push(row + 1);
                row += 2;
            }
        }
        let total = row;
        let mut row_of = vec![0usize; total];
        let mut blocks = Vec::new();
        let mut offset = 0;
        if !cached.is_empty() {
            let data: Vec<Vec<f64>> = cached.iter().map(|(_, z)| z.to_vec()).collect();
            blocks.push(g.constant(Tensor::from_rows(&data)?));
            for (j, (r, _)) in cached.iter().enumerate() {
                row_of[*r] = offset + j;
            }
            offset += cached.len();
        }
        for (i, group) in encode.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let rows: Vec<&[f64]> = group.iter().map(|(_, f)| *f).collect();
            blocks.push(bank.encode_rows(g, i, &rows, train, rng)?);
            for (j, (r, _)) in group.iter().enumerate() {
                row_of[*r] = offset + j;
            }
            offset += group.len();
        }
        for (i, rows) in tokens.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            blocks.push(bank.token(g, i)?);
            for r in rows {
                row_of[*r] = offset;
            }
            offset += 1;
        }
        blocks.push(g.param(&self.store, self.predict));
        for r in predict_rows {
            row_of[r] = offset;
        }
        let all = g.concat_rows(&blocks)?;
        Ok(g.gather_rows(all, &row_of)?)
    }

    /// Runs the decoder over a batch of timelines.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bank: &EncoderBank,
        timelines: &[&EventTimeline],
        train: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        if timelines.is_empty() {
            return Err(CoreError::data("decoder forward on an empty batch"));
        }
        if bank.latent_dim() != self.latent_dim {
            return Err(CoreError::config(format!(
                "decoder expects latent dim {}, encoder bank has {}",
                self.latent_dim,
                bank.latent_dim()
            )));
        }
        for t in timelines {
            if t.events.is_empty() {
                return Err(CoreError::data(format!("stay {} has an empty timeline", t.stay_id)));
            }
            if t.n_events() > MAX_EVENTS {
                return Err(CoreError::data(format!(
                    "stay {} has {} events; the decoder accepts at most {MAX_EVENTS}",
                    t.stay_id,
                    t.n_events()
                )));
            }
        }
        let x = self.inputs(g, bank, timelines, train, rng)?;
        let mut time = Vec::new();
        let mut pe = Vec::new();
        let mut segments = Vec::new();
        let mut slot_rows = Vec::new();
        let d = self.cfg.d_model;
        let mut start = 0;
        for t in timelines {
            for e in &t.events {
                let f = time_feature(e.offset_minutes);
                time.extend([f, f]);
            }
            pe.extend(positional(t.seq_len(), d));
            segments.push(t.seq_len());
            slot_rows.extend(t.predict_positions().into_iter().map(|p| start + p));
            start += t.seq_len();
        }
        let time = g.constant(Tensor::new(vec![start, 1], time)?);
        let x = g.concat_cols(x, time)?;
        let h = self.dense(g, x, self.proj)?;
        let pe = g.constant(Tensor::new(vec![start, d], pe)?);
        let mut h = g.add(h, pe)?;
        let p = if train { self.cfg.dropout } else { 0.0 };
        let mut last_attention = None;
        for b in &self.blocks {
            let a = self.norm(g, h, b.ln1)?;
            let q = self.dense(g, a, b.q)?;
            let k = self.dense(g, a, b.k)?;
            let v = self.dense(g, a, b.v)?;
            let att = g.causal_attention(q, k, v, self.cfg.heads, &segments)?;
            last_attention = Some(att);
            let o = self.dense(g, att, b.o)?;
            let o = g.dropout(o, p, rng)?;
            h = g.add(h, o)?;
            let f = self.norm(g, h, b.ln2)?;
            let f = self.dense(g, f, b.ff1)?;
            let f = g.gelu(f)?;
            let f = self.dense(g, f, b.ff2)?;
            let f = g.dropout(f, p, rng)?;
            h = g.add(h, f)?;
        }
        let h = self.norm(g, h, self.ln_f)?;
        let s = g.gather_rows(h, &slot_rows)?;
        let outputs = self.dense(g, s, self.head)?;
        Ok(Forward {
            outputs,
            last_attention: last_attention.expect("at least one layer"),
            slots: timelines.iter().map(|t| t.n_events()).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.store.save(path)?)
    }

    pub fn load(latent_dim: usize, cfg: &DecoderConfig, path: &Path) -> Result<Self> {
        let mut d = Self::new(latent_dim, cfg, 0)?;
        d.store.load_values(path)?;
        Ok(d)
    }
}

/// Positive-class weights computed on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    pub pos_weight: Vec<f64>,
}

impl TaskWeights {
    /// `#neg / #pos` per class. Mortality without positives is an error;
    /// phenotype weights are capped at [`PHENOTYPE_WEIGHT_CAP`].
    pub fn from_labels<'a>(task: Task, labels: impl IntoIterator<Item = &'a StayLabels>) -> Result<Self> {
        let labels: Vec<&StayLabels> = labels.into_iter().collect();
        let ratio = |pos: usize| (labels.len() - pos) as f64 / pos as f64;
        Ok(match task {
            Task::Mortality => {
                let pos = labels.iter().filter(|l| l.mortality == 1).count();
                if pos == 0 {
                    return Err(CoreError::data("training split has no positive mortality label"));
                }
                Self { pos_weight: vec![ratio(pos)] }
            }
            Task::Phenotyping => Self {
                pos_weight: (0..N_PHENOTYPES)
                    .map(|c| {
                        let pos = labels.iter().filter(|l| l.phenotypes[c] == 1).count();
                        if pos == 0 {
                            log::warn!("phenotype {c} is never positive in training; weight capped");
                            PHENOTYPE_WEIGHT_CAP
                        } else {
                            ratio(pos).min(PHENOTYPE_WEIGHT_CAP)
                        }
                    })
                    .collect(),
            },
            Task::Los => Self { pos_weight: vec![1.0] },
        })
    }
}

/// Records the task loss: per-slot losses averaged within each stay, then
/// over the stays of the batch.
pub fn task_loss(
    g: &mut Graph,
    task: Task,
    weights: &TaskWeights,
    outputs: Var,
    slots: &[usize],
    labels: &[&StayLabels],
) -> Result<Var> {
    if slots.len() != labels.len() {
        return Err(CoreError::data("one label set per timeline required"));
    }
    let b = slots.len() as f64;
    let mut targets = Vec::new();
    let mut row_w = Vec::new();
    for (&n, l) in slots.iter().zip(labels) {
        let t = task.targets(l)?;
        for _ in 0..n {
            targets.extend_from_slice(&t);
            row_w.push(1.0 / (n as f64 * b));
        }
    }
    let rows = row_w.len();
    let targets = Tensor::new(vec![rows, task.out_dim()], targets)?;
    Ok(match task {
        Task::Los => g.weighted_sq_error(outputs, &targets, &row_w)?,
        _ => g.bce_with_logits(outputs, &targets, &weights.pos_weight, &row_w)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub modality_dropout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            max_epochs: 30,
            patience: 5,
            modality_dropout: 0.2,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CoreError::config("finetune.batch_size and finetune.max_epochs must be >= 1"));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::config("finetune.lr must be positive and weight_decay nonnegative"));
        }
        if !(0.0..1.0).contains(&self.modality_dropout) {
            return Err(CoreError::config("finetune.modality_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub decoder: Decoder,
    pub bank: EncoderBank,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
    pub log: Vec<FinetuneEpoch>,
    /// Set when training stopped on a non-finite value; the models are then
    /// the last finite state.
    pub diverged: Option<String>,
}

/// Mean task loss over `timelines` in evaluation mode.
pub fn evaluate_task_loss(
    decoder: &Decoder,
    bank: &EncoderBank,
    weights: &TaskWeights,
    timelines: &[EventTimeline],
    batch_size: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in timelines.chunks(batch_size.max(1)) {
        let refs: Vec<&EventTimeline> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = decoder.forward(&mut g, bank, &refs, false, &mut rng)?;
        let labels: Vec<&StayLabels> = chunk.iter().map(|t| &t.labels).collect();
        let loss = task_loss(&mut g, decoder.task(), weights, f.outputs, &f.slots, &labels)?;
        total += g.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / timelines.len().max(1) as f64)
}

fn grads_finite(store: &ParamStore) -> bool {
    store.iter().all(|(_, p)| p.grad.is_finite())
}

/// Trains the decoder (and the bank, unless frozen) with early stopping on
/// validation loss. Modality dropout applies to training batches only.
pub fn finetune(
    decoder: Decoder,
    bank: EncoderBank,
    train: &[EventTimeline],
    val: &[EventTimeline],
    weights: &TaskWeights,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::data("fine-tuning needs nonempty train and validation splits"));
    }
    let (mut decoder, mut bank) = (decoder, bank);
    let frozen = bank.is_frozen();
    let mut dec_opt = Adam::new(&decoder.store, cfg.lr, cfg.weight_decay);
    let mut enc_opt = Adam::new(&bank.store, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial_val_loss = evaluate_task_loss(&decoder, &bank, weights, val, cfg.batch_size)?;
    let mut best = (initial_val_loss, decoder.clone(), bank.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut diverged = None;
    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EventTimeline> = chunk
                .iter()
                .map(|&i| train[i].with_modality_dropout(cfg.modality_dropout, &mut rng))
                .collect();
            let refs: Vec<&EventTimeline> = batch.iter().collect();
            let labels: Vec<&StayLabels> = batch.iter().map(|t| &t.labels).collect();
            let mut g = Graph::new();
            let step = decoder
                .forward(&mut g, &bank, &refs, true, &mut rng)
                .and_then(|f| task_loss(&mut g, decoder.task(), weights, f.outputs, &f.slots, &labels));
            let loss = match step {
                Ok(l) => l,
                Err(CoreError::Nn(NnError::NonFinite { op })) => {
                    diverged = Some(format!("non-finite value in {op} during epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let grads = g.backward(loss)?;
            decoder.store.zero_grad();
            g.accumulate_into(&grads, &mut decoder.store);
            if !frozen {
                bank.store.zero_grad();
                g.accumulate_into(&grads, &mut bank.store);
            }
            if !grads_finite(&decoder.store) || (!frozen && !grads_finite(&bank.store)) {
                diverged = Some(format!("non-finite gradient during epoch {epoch}"));
                break 'epochs;
            }
            dec_opt.step(&mut decoder.store);
            if !frozen {
                enc_opt.step(&mut bank.store);
            }
            sum += g.scalar(loss) * chunk.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = evaluate_task_loss(&decoder, &bank, weights, val, cfg.batch_size)?;
        log::debug!("finetune epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        log.push(FinetuneEpoch { epoch, train_loss, val_loss });
        if val_loss < best.0 {
            best = (val_loss, decoder.clone(), bank.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some(msg) = &diverged {
        log::error!("fine-tuning diverged: {msg}");
        return Ok(FinetuneOutcome { decoder, bank, best_val_loss: best.0, initial_val_loss, log, diverged });
    }
    Ok(FinetuneOutcome {
        decoder: best.1,
        bank: best.2,
        best_val_loss: best.0,
        initial_val_loss,
        log,
        diverged: None,
    })
}

/// Per-slot predictions of one stay: probabilities for classification tasks,
/// `ln(1 + hours)` for length of stay.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub stay_id: u64,
    pub event_ids: Vec<usize>,
    pub offsets: Vec<f64>,
    pub outputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_output(&self) -> &[f64] {
        self.outputs.last().expect("trajectories are nonempty")
    }
}

fn to_trajectories(task: Task, raw: &Tensor, timelines: &[&EventTimeline]) -> Vec<Trajectory> {
    let mut row = 0;
    timelines
        .iter()
        .map(|t| {
            let outputs = (0..t.n_events())
                .map(|j| {
                    let r = raw.row(row + j);
                    if task.is_classification() {
                        r.iter().map(|&x| sigmoid(x)).collect()
                    } else {
                        r.to_vec()
                    }
                })
                .collect();
            row += t.n_events();
            Trajectory {
                stay_id: t.stay_id,
                event_ids: t.events.iter().map(|e| e.id).collect(),
                offsets: t.events.iter().map(|e| e.offset_minutes).collect(),
                outputs,
            }
        })
        .collect()
}

/// Evaluation-mode trajectories for many stays.
pub fn predict(decoder: &Decoder, bank: &EncoderBank, timelines: &[EventTimeline], batch_size: usize) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(timelines.len());
    for chunk in timelines.chunks(batch_size.max(1)) {
        let refs: Vec<&EventTimeline> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = decoder.forward(&mut g, bank, &refs, false, &mut rng)?;
        out.extend(to_trajectories(decoder.task(), g.value(f.outputs), &refs));
    }
    Ok(out)
}

/// Raw head outputs (logits or regression values) at every slot of one stay.
pub fn slot_logits(decoder: &Decoder, bank: &EncoderBank, timeline: &EventTimeline) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let f = decoder.forward(&mut g, bank, &[timeline], false, &mut rng)?;
    Ok(g.value(f.outputs).to_rows())
}

/// Evaluation-mode trajectory of one stay with its final-layer attention
/// weights `[heads, T, T]`.
pub fn forward_with_attention(decoder: &Decoder, bank: &EncoderBank, timeline: &EventTimeline) -> Result<(Trajectory, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let f = decoder.forward(&mut g, bank, &[timeline], false, &mut rng)?;
    let traj = to_trajectories(decoder.task(), g.value(f.outputs), &[timeline]).remove(0);
    let w = g.attention_weights(f.last_attention).expect("attention node")[0].clone();
    Ok((traj, w))
}

/// Trajectory CSV: `stay_id,slot_index,offset_minutes,prediction[,class_id]`.
pub fn write_trajectories_csv<W: Write>(task: Task, trajectories: &[Trajectory], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if task == Task::Phenotyping {
        wr.write_record(["stay_id", "slot_index", "offset_minutes", "prediction", "class_id"])?;
    } else {
        wr.write_record(["stay_id", "slot_index", "offset_minutes", "prediction"])?;
    }
    for t in trajectories {
        for (j, (off, out)) in t.offsets.iter().zip(&t.outputs).enumerate() {
            if task == Task::Phenotyping {
                for (c, v) in out.iter().enumerate() {
                    wr.write_record([t.stay_id.to_string(), j.to_string(), off.to_string(), v.to_string(), c.to_string()])?;
                }
            } else {
                wr.write_record([t.stay_id.to_string(), j.to_string(), off.to_string(), out[0].to_string()])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_finetune_log_csv<W: Write>(log: &[FinetuneEpoch], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "train_loss", "val_loss"])?;
    for e in log {
        wr.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
