//! Pipeline stages over a run directory.
//!
//! Layout:
//!
//! ```text
//! <run>/config.resolved     resolved experiment config with the crate version
//! <run>/data/               cohort, split, timelines, test embeddings
//! <run>/checkpoints/        encoder bank and decoder parameters
//! <run>/metrics/            metric CSVs
//! <run>/traces/             attention heatmaps and ablation trajectory pairs
//! <run>/logs/               training logs
//! ```
//!
//! Each stage reads only artifacts of earlier stages and fails with
//! [`CoreError::MissingArtifact`] when one is absent. All randomness derives
//! from the config seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{self, write_log_csv};
use crate::cohort::{self, Cohort};
use crate::config::ExperimentConfig;
use crate::decoder::{self, Decoder, DecoderConfig, Task, TaskWeights, Trajectory};
use crate::encoder::{stay_events, write_embeddings_csv, EncoderBank, LatentEmbedding, StayEvents, StayView};
use crate::error::{CoreError, Result};
use crate::interp::{self, AblationReport};
use crate::latent_eval::{self, Retrieval, Silhouette};
use crate::metrics::{self, MetricRow};
use crate::split::{self, CohortSplit, Split};
use crate::timeline::{self, EventTimeline};

pub const CONFIG_FILE: &str = "config.resolved";
pub const SUBDIRS: [&str; 5] = ["data", "checkpoints", "metrics", "traces", "logs"];

pub const SCHEMA: &str = "data/schema.json";
pub const RECORDS: &str = "data/records.jsonl";
pub const LABELS: &str = "data/labels.csv";
pub const SPLIT: &str = "data/split.csv";
pub const TIMELINES: &str = "data/timelines.jsonl";
pub const SPLIT_REPORT: &str = "metrics/split_report.csv";
pub const ENCODERS: &str = "checkpoints/encoders.json";
pub const PRETRAIN_LOG: &str = "logs/pretrain.csv";
pub const PRETRAIN_GRID: &str = "logs/pretrain_grid.csv";
pub const EMBEDDINGS: &str = "data/embeddings_test.csv";
pub const RETRIEVAL: &str = "metrics/retrieval.csv";
pub const SILHOUETTE: &str = "metrics/silhouette.csv";
pub const SILHOUETTE_UNTRAINED: &str = "metrics/silhouette_untrained.csv";
pub const TASK_METRICS: &str = "metrics/task_metrics.csv";
pub const SLOT_METRICS: &str = "metrics/slot_metrics.csv";
pub const ABLATION: &str = "metrics/ablation.csv";
pub const SWEEP: &str = "metrics/sweep.csv";

pub const ARCHITECTURE: &str = "causal-transformer";

const SPLIT_SEED: u64 = 1;
const ENCODER_INIT_SEED: u64 = 2;
const PRETRAIN_SEED: u64 = 3;
const DECODER_INIT_SEED: u64 = 4;
const FINETUNE_SEED: u64 = 5;
const STRESS_SEED: u64 = 6;
const SWEEP_SEED: u64 = 7;

/// Encoder initialization of a fine-tuned model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Pretrained alignment encoders, frozen.
    Contrastive,
    /// Randomly initialized encoders trained with the decoder.
    Scratch,
}

impl Init {
    pub const ALL: [Init; 2] = [Init::Contrastive, Init::Scratch];

    pub fn as_str(self) -> &'static str {
        match self {
            Init::Contrastive => "contrastive",
            Init::Scratch => "scratch",
        }
    }
}

pub fn decoder_checkpoint(init: Init, task: Task) -> String {
    format!("checkpoints/decoder_{}_{}.json", init.as_str(), task.as_str())
}

pub fn scratch_encoders_checkpoint(task: Task) -> String {
    format!("checkpoints/encoders_scratch_{}.json", task.as_str())
}

pub fn finetune_log(init: Init, task: Task) -> String {
    format!("logs/finetune_{}_{}.csv", init.as_str(), task.as_str())
}

pub fn trajectories_file(init: Init, task: Task) -> String {
    format!("metrics/trajectories_{}_{}.csv", init.as_str(), task.as_str())
}

/// An experiment's run directory and its resolved configuration.
#[derive(Clone, Debug)]
pub struct Run {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

fn resolved_text(config: &ExperimentConfig) -> Result<String> {
    Ok(format!("# mga-core {}\n{}", env!("CARGO_PKG_VERSION"), config.to_toml()?))
}

impl Run {
    /// Creates the directory layout and records the resolved config. An
    /// existing run directory must carry the identical resolved config.
    pub fn open(root: &Path, config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        for d in SUBDIRS {
            std::fs::create_dir_all(root.join(d))?;
        }
        let text = resolved_text(&config)?;
        let path = root.join(CONFIG_FILE);
        if path.exists() {
            if std::fs::read_to_string(&path)? != text {
                return Err(CoreError::config(format!(
                    "{} was created with a different configuration; use a fresh run directory",
                    root.display()
                )));
            }
        } else {
            std::fs::write(&path, text)?;
        }
        Ok(Self { root: root.to_path_buf(), config })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, rel: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CoreError::MissingArtifact { path: p, stage })
        }
    }

    fn seed(&self, offset: u64) -> u64 {
        self.config.seed.wrapping_add(offset)
    }

    fn write<F>(&self, rel: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.path(rel))?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_cohort(&self) -> Result<Cohort> {
        let schema = self.require(SCHEMA, "synth")?;
        let records = self.require(RECORDS, "synth")?;
        let labels = self.require(LABELS, "synth")?;
        let modalities = cohort::read_schema(&schema)?;
        let records = cohort::read_records_jsonl(&modalities, BufReader::new(File::open(records)?))?;
        let labels = cohort::read_labels_csv(File::open(labels)?)?;
        Ok(Cohort { modalities, records, labels })
    }

    pub fn load_split(&self, cohort: &Cohort) -> Result<CohortSplit> {
        let p = self.require(SPLIT, "split")?;
        split::read_split_csv(File::open(p)?, cohort)
    }

    pub fn load_pretrained(&self, cohort: &Cohort) -> Result<EncoderBank> {
        let p = self.require(ENCODERS, "pretrain")?;
        let mut bank = EncoderBank::load(&cohort.modalities, &self.config.encoder, &p)?;
        bank.freeze();
        Ok(bank)
    }

    fn untrained_bank(&self, cohort: &Cohort) -> Result<EncoderBank> {
        EncoderBank::new(&cohort.modalities, &self.config.encoder, self.seed(ENCODER_INIT_SEED))
    }

    fn decoder_config(&self, task: Task) -> DecoderConfig {
        DecoderConfig { task, ..self.config.decoder.clone() }
    }

    /// Trained decoder and encoder bank of one initialization and task.
    pub fn load_model(&self, cohort: &Cohort, init: Init, task: Task) -> Result<(Decoder, EncoderBank)> {
        let bank = match init {
            Init::Contrastive => self.load_pretrained(cohort)?,
            Init::Scratch => {
                let p = self.require(&scratch_encoders_checkpoint(task), "finetune")?;
                EncoderBank::load(&cohort.modalities, &self.config.encoder, &p)?
            }
        };
        let p = self.require(&decoder_checkpoint(init, task), "finetune")?;
        let decoder = Decoder::load(bank.latent_dim(), &self.decoder_config(task), &p)?;
        Ok((decoder, bank))
    }
}

fn names(cohort: &Cohort) -> Vec<String> {
    cohort.modalities.iter().map(|m| m.name.clone()).collect()
}

/// Generates the cohort: records JSONL, labels CSV and modality schema.
pub fn synth(run: &Run) -> Result<Cohort> {
    let gcfg = run.config.cohort.generator(run.config.seed)?;
    let cohort = cohort::generate(&gcfg)?;
    cohort::write_schema(&cohort.modalities, &run.path(SCHEMA))?;
    run.write(RECORDS, |w| cohort::write_records_jsonl(&cohort, w))?;
    run.write(LABELS, |w| cohort::write_labels_csv(&cohort.labels, w))?;
    log::info!("synth: {} stays, {} records", cohort.labels.len(), cohort.records.len());
    Ok(cohort)
}

/// Stratified split, its presence report and the timeline export.
pub fn split(run: &Run) -> Result<CohortSplit> {
    let cohort = run.load_cohort()?;
    let s = split::stratify(&cohort, run.seed(SPLIT_SEED))?;
    let n = names(&cohort);
    run.write(SPLIT, |w| split::write_split_csv(&s, w))?;
    run.write(SPLIT_REPORT, |w| split::write_report_csv(&s, &n, w))?;
    let timelines = timeline::assemble_all(&cohort, &cohort.stay_ids())?;
    run.write(TIMELINES, |w| timeline::write_timelines_jsonl(&timelines, &n, w))?;
    for r in split::split_report(&s) {
        log::info!("split {}: {} stays", r.split, r.n_stays);
    }
    Ok(s)
}

fn split_events(cohort: &Cohort, s: &CohortSplit, which: Split) -> Result<Vec<StayEvents>> {
    stay_events(cohort, &s.stays(which))
}

/// Alignment pretraining over the learning-rate and weight-decay grid.
pub fn pretrain(run: &Run) -> Result<align::PretrainOutcome> {
    let cohort = run.load_cohort()?;
    let s = run.load_split(&cohort)?;
    let train = split_events(&cohort, &s, Split::Train)?;
    let val = split_events(&cohort, &s, Split::Val)?;
    let init = run.untrained_bank(&cohort)?;
    let out = align::pretrain(&init, &train, &val, &run.config.pretrain, run.seed(PRETRAIN_SEED))?;
    if !out.best_val_loss.is_finite() {
        return Err(CoreError::Numeric("pretraining produced no finite validation loss".into()));
    }
    out.bank.save(&run.path(ENCODERS))?;
    let n = names(&cohort);
    run.write(PRETRAIN_LOG, |w| write_log_csv(&out.log, &n, w))?;
    run.write(PRETRAIN_GRID, |w| {
        writeln!(w, "lr,weight_decay,best_val_loss")?;
        for (lr, wd, v) in &out.grid {
            writeln!(w, "{lr},{wd},{v}")?;
        }
        Ok(())
    })?;
    log::info!("pretrain: lr={} wd={} val loss {:.5} tau {:.4}", out.lr, out.weight_decay, out.best_val_loss, out.bank.tau());
    Ok(out)
}

/// Evaluation-mode embeddings of every (stay, modality) from each stay's
/// first events.
pub fn embed(bank: &EncoderBank, events: &[StayEvents]) -> Result<Vec<LatentEmbedding>> {
    let views: Vec<StayView> = events.iter().map(StayEvents::first_view).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(views.len() * bank.n_modalities());
    for chunk in views.chunks(512) {
        out.extend(bank.encode_batch(chunk, 0.0, false, &mut rng)?.0);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LatentReport {
    pub retrieval: Vec<Retrieval>,
    pub silhouette: Silhouette,
    pub silhouette_untrained: Silhouette,
}

/// Retrieval and silhouette of the pretrained space on the test split, plus
/// the silhouette of the untrained encoders for reference.
pub fn latent_eval(run: &Run) -> Result<LatentReport> {
    let cohort = run.load_cohort()?;
    let s = run.load_split(&cohort)?;
    let bank = run.load_pretrained(&cohort)?;
    let test = split_events(&cohort, &s, Split::Test)?;
    let n = names(&cohort);
    let emb = embed(&bank, &test)?;
    run.write(EMBEDDINGS, |w| write_embeddings_csv(&emb, &n, w))?;
    let retrieval = latent_eval::all_pairs(&emb, cohort.n_modalities(), &run.config.eval.retrieval_k)?;
    run.write(RETRIEVAL, |w| latent_eval::write_retrieval_csv(&retrieval, &n, w))?;
    let silhouette = latent_eval::modality_silhouette(&emb, false)?;
    run.write(SILHOUETTE, |w| latent_eval::write_silhouette_csv(&silhouette, &n, w))?;
    let raw = embed(&run.untrained_bank(&cohort)?, &test)?;
    let silhouette_untrained = latent_eval::modality_silhouette(&raw, false)?;
    run.write(SILHOUETTE_UNTRAINED, |w| latent_eval::write_silhouette_csv(&silhouette_untrained, &n, w))?;
    if let Some((r, b)) = latent_eval::macro_recall(&retrieval, 1) {
        log::info!("latent-eval: macro R@1 {r:.4} (random {b:.4}), silhouette {:.4} (untrained {:.4})", silhouette.overall, silhouette_untrained.overall);
    }
    Ok(LatentReport { retrieval, silhouette, silhouette_untrained })
}

fn split_timelines(cohort: &Cohort, s: &CohortSplit, which: Split, bank: &EncoderBank) -> Result<Vec<EventTimeline>> {
    let mut t = timeline::assemble_all(cohort, &s.stays(which))?;
    if bank.is_frozen() {
        timeline::attach_embeddings(bank, &mut t)?;
    }
    Ok(t)
}

/// Fine-tunes a contrastive and a scratch decoder for every configured task.
pub fn finetune(run: &Run) -> Result<()> {
    let cohort = run.load_cohort()?;
    let s = run.load_split(&cohort)?;
    let pretrained = run.load_pretrained(&cohort)?;
    for &task in &run.config.tasks {
        for init in Init::ALL {
            let bank = match init {
                Init::Contrastive => pretrained.clone(),
                Init::Scratch => run.untrained_bank(&cohort)?,
            };
            let train = split_timelines(&cohort, &s, Split::Train, &bank)?;
            let val = split_timelines(&cohort, &s, Split::Val, &bank)?;
            let weights = TaskWeights::from_labels(task, train.iter().map(|t| &t.labels))?;
            let dec = Decoder::new(bank.latent_dim(), &run.decoder_config(task), run.seed(DECODER_INIT_SEED))?;
            let out = decoder::finetune(dec, bank, &train, &val, &weights, &run.config.finetune, run.seed(FINETUNE_SEED))?;
            out.decoder.save(&run.path(&decoder_checkpoint(init, task)))?;
            if init == Init::Scratch {
                out.bank.save(&run.path(&scratch_encoders_checkpoint(task)))?;
            }
            run.write(&finetune_log(init, task), |w| decoder::write_finetune_log_csv(&out.log, w))?;
            if let Some(reason) = out.diverged {
                return Err(CoreError::Numeric(format!(
                    "{} {} fine-tuning diverged ({reason}); last finite state saved",
                    init.as_str(),
                    task.as_str()
                )));
            }
            log::info!(
                "finetune {} {}: val loss {:.5} -> {:.5}",
                init.as_str(),
                task.as_str(),
                out.initial_val_loss,
                out.best_val_loss
            );
        }
    }
    Ok(())
}

/// Removes one uniformly drawn modality from every stay holding at least
/// two. Draws depend only on `seed` and the stay order.
pub fn remove_one_modality(timelines: &[EventTimeline], seed: u64) -> Result<Vec<EventTimeline>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    timelines
        .iter()
        .map(|t| {
            let mods = t.modalities();
            let pick = rng.gen_range(0..mods.len());
            if mods.len() < 2 {
                Ok(t.clone())
            } else {
                t.ablate_modality(mods[pick])
            }
        })
        .collect()
}

fn metric_row(init: Init, task: Task, metric: &str, value: f64) -> MetricRow {
    MetricRow {
        architecture: ARCHITECTURE.into(),
        initialization: init.as_str().into(),
        task: task.as_str().into(),
        metric: metric.into(),
        value,
    }
}

fn binary_labels(task: Task, t: &EventTimeline) -> Result<Vec<u8>> {
    Ok(task.targets(&t.labels)?.iter().map(|&v| v as u8).collect())
}

/// Final-slot metrics of one prediction set. Classification: AUROC, AUPRC,
/// ACE and BSS (macro over classes for multi-label). Length of stay: MSE,
/// MAE, Pearson and Spearman in hours; undefined correlations are NaN.
pub fn final_slot_metrics(
    task: Task,
    preds: &[Trajectory],
    timelines: &[EventTimeline],
    ace_bins: usize,
) -> Result<Vec<(&'static str, f64)>> {
    let finals: Vec<Vec<f64>> = preds.iter().map(|p| p.final_output().to_vec()).collect();
    if task.is_classification() {
        let labels: Vec<Vec<u8>> = timelines.iter().map(|t| binary_labels(task, t)).collect::<Result<_>>()?;
        let auroc = metrics::macro_average(&finals, &labels, metrics::auroc)?.0;
        let auprc = metrics::macro_average(&finals, &labels, metrics::auprc)?.0;
        let ace = metrics::macro_average(&finals, &labels, |p, l| metrics::ace(p, l, ace_bins))?.0;
        let bss = metrics::macro_average(&finals, &labels, metrics::bss)?.0;
        Ok(vec![("auroc", auroc), ("auprc", auprc), ("ace", ace), ("bss", bss)])
    } else {
        let pred: Vec<f64> = finals.iter().map(|f| f[0].exp_m1()).collect();
        let truth: Vec<f64> = timelines.iter().map(|t| t.labels.los_hours).collect();
        let r = metrics::regression_suite(&pred, &truth)?;
        Ok(vec![
            ("mse", r.mse),
            ("mae", r.mae),
            ("pearson", r.pearson.unwrap_or(f64::NAN)),
            ("spearman", r.spearman.unwrap_or(f64::NAN)),
        ])
    }
}

/// Per-slot metric over stays with more than `slot` events: AUROC (macro
/// for multi-label) or length-of-stay MAE in hours.
fn slot_metric(task: Task, preds: &[Trajectory], timelines: &[EventTimeline], slot: usize) -> Result<Option<(usize, f64)>> {
    let sel: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].outputs.len() > slot).collect();
    if sel.len() < 10 {
        return Ok(None);
    }
    let out: Vec<Vec<f64>> = sel.iter().map(|&i| preds[i].outputs[slot].clone()).collect();
    if task.is_classification() {
        let labels: Vec<Vec<u8>> = sel.iter().map(|&i| binary_labels(task, &timelines[i])).collect::<Result<_>>()?;
        match metrics::macro_average(&out, &labels, metrics::auroc) {
            Ok((v, _)) => Ok(Some((sel.len(), v))),
            Err(CoreError::Data(_)) => Ok(None),
            Err(e) => Err(e),
        }
    } else {
        let mae = sel
            .iter()
            .zip(&out)
            .map(|(&i, o)| (o[0].exp_m1() - timelines[i].labels.los_hours).abs())
            .sum::<f64>()
            / sel.len() as f64;
        Ok(Some((sel.len(), mae)))
    }
}

/// Test-split metrics for every fine-tuned model, on intact timelines and
/// under evaluation-time removal of one modality per stay (`stress_` rows).
pub fn task_eval(run: &Run) -> Result<Vec<MetricRow>> {
    let cohort = run.load_cohort()?;
    let s = run.load_split(&cohort)?;
    let ev = &run.config.eval;
    let mut rows = Vec::new();
    let mut slot_rows = Vec::new();
    for &task in &run.config.tasks {
        for init in Init::ALL {
            let (dec, bank) = run.load_model(&cohort, init, task)?;
            let test = split_timelines(&cohort, &s, Split::Test, &bank)?;
            let preds = decoder::predict(&dec, &bank, &test, ev.batch_size)?;
            run.write(&trajectories_file(init, task), |w| decoder::write_trajectories_csv(task, &preds, w))?;
            for (m, v) in final_slot_metrics(task, &preds, &test, ev.ace_bins)? {
                rows.push(metric_row(init, task, m, v));
            }
            let stressed = remove_one_modality(&test, run.seed(STRESS_SEED))?;
            let stressed_preds = decoder::predict(&dec, &bank, &stressed, ev.batch_size)?;
            for (m, v) in final_slot_metrics(task, &stressed_preds, &stressed, ev.ace_bins)? {
                rows.push(metric_row(init, task, &format!("stress_{m}"), v));
            }
            let max_slots = preds.iter().map(|p| p.outputs.len()).max().unwrap_or(0);
            for slot in 0..max_slots {
                if let Some((n, v)) = slot_metric(task, &preds, &test, slot)? {
                    slot_rows.push((init, task, slot, n, v));
                }
            }
        }
    }
    run.write(TASK_METRICS, |w| metrics::write_metric_rows(&rows, w))?;
    run.write(SLOT_METRICS, |w| {
        writeln!(w, "initialization,task,slot,n_stays,metric,value")?;
        for (init, task, slot, n, v) in &slot_rows {
            let m = if task.is_classification() { "auroc" } else { "mae" };
            writeln!(w, "{},{},{slot},{n},{m},{v}", init.as_str(), task.as_str())?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// One traced stay of the interpretation stage.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub init: Init,
    pub stay_id: u64,
    pub report: AblationReport,
    pub sink_score: f64,
}

fn interp_task(tasks: &[Task]) -> Task {
    tasks
        .iter()
        .copied()
        .find(|t| *t == Task::Mortality)
        .or_else(|| tasks.iter().copied().find(|t| t.is_classification()))
        .unwrap_or(tasks[0])
}

/// Modality ablation on test stays holding both the ablated and the sink
/// modality: heatmaps, annotations and trajectory pairs under `traces/`, a
/// per-stay summary in the ablation CSV.
pub fn interpret(run: &Run) -> Result<Vec<AblationRow>> {
    let cohort = run.load_cohort()?;
    let s = run.load_split(&cohort)?;
    let cfg = &run.config.interp;
    let n = names(&cohort);
    let ablate = match &cfg.ablate {
        Some(a) => cohort.modality_index(a),
        None => cohort.modalities.iter().position(|m| !m.is_static),
    }
    .ok_or_else(|| CoreError::config("interp: no modality to ablate"))?;
    let sink = cohort
        .modality_index(&cfg.sink)
        .ok_or_else(|| CoreError::config(format!("interp.sink: unknown modality {:?}", cfg.sink)))?;
    if sink == ablate {
        return Err(CoreError::config("interp.sink and interp.ablate must differ"));
    }
    let task = interp_task(&run.config.tasks);
    let mut rows = Vec::new();
    for init in Init::ALL {
        let (dec, bank) = run.load_model(&cohort, init, task)?;
        let test = split_timelines(&cohort, &s, Split::Test, &bank)?;
        let chosen: Vec<&EventTimeline> = test
            .iter()
            .filter(|t| t.has_modality(ablate) && t.has_modality(sink))
            .take(cfg.n_stays)
            .collect();
        let dir = format!("traces/{}", init.as_str());
        std::fs::create_dir_all(run.path(&dir))?;
        for t in chosen {
            let report = interp::compare_ablation(&dec, &bank, t, ablate)?;
            let sink_score = interp::sink_score(&report, sink)?;
            let stem = format!("{dir}/stay_{}", t.stay_id);
            for (tag, trace) in [("baseline", &report.baseline), ("ablated", &report.ablated)] {
                run.write(&format!("{stem}_{tag}_heatmap.csv"), |w| interp::write_heatmap_csv(trace, w))?;
                run.write(&format!("{stem}_{tag}_positions.json"), |w| interp::write_annotation_json(trace, &n, w))?;
            }
            run.write(&format!("{stem}_trajectory_pair.csv"), |w| interp::write_trajectory_pair_csv(&report, w))?;
            rows.push(AblationRow { init, stay_id: t.stay_id, report, sink_score });
        }
    }
    run.write(ABLATION, |w| {
        writeln!(w, "initialization,task,stay_id,removed_modality,sink_modality,trajectory_divergence,flip,sink_score")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.init.as_str(),
                task.as_str(),
                r.stay_id,
                n[ablate],
                n[sink],
                r.report.trajectory_divergence,
                r.report.flip,
                r.sink_score
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Removes `modality` from a `rate` share of the stays that hold it and at
/// least one other modality.
pub fn drop_modality_share(events: &[StayEvents], modality: usize, rate: f64, seed: u64) -> Vec<StayEvents> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    events
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let others = e.events.iter().enumerate().any(|(i, v)| i != modality && !v.is_empty());
            if !e.events[modality].is_empty() && others && rng.gen::<f64>() < rate {
                e.events[modality].clear();
            }
            e
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub modality: String,
    pub rate: f64,
    pub silhouette_with_tokens: f64,
    pub silhouette_encoded: f64,
}

/// Latent-space degradation under simulated missingness: one pretraining
/// per (modality, rate) with that share of the modality removed from every
/// split, scored by test silhouette.
pub fn sweep(run: &Run) -> Result<Vec<SweepPoint>> {
    let cohort = run.load_cohort()?;
    let s = run.load_split(&cohort)?;
    let cfg = &run.config.sweep;
    let mut pcfg = run.config.pretrain.clone();
    pcfg.max_epochs = cfg.max_epochs;
    let targets: Vec<usize> = if cfg.modalities.is_empty() {
        (0..cohort.n_modalities()).collect()
    } else {
        cfg.modalities.iter().filter_map(|m| cohort.modality_index(m)).collect()
    };
    let base = [Split::Train, Split::Val, Split::Test].map(|w| split_events(&cohort, &s, w));
    let [train, val, test] = base;
    let (train, val, test) = (train?, val?, test?);
    let init = run.untrained_bank(&cohort)?;
    let mut points = Vec::new();
    for &m in &targets {
        for (ri, &rate) in cfg.rates.iter().enumerate() {
            let seed = run.seed(SWEEP_SEED).wrapping_add((m as u64) << 16 | ri as u64);
            let tr = drop_modality_share(&train, m, rate, seed);
            let va = drop_modality_share(&val, m, rate, seed ^ 1);
            let te = drop_modality_share(&test, m, rate, seed ^ 2);
            let out = align::pretrain(&init, &tr, &va, &pcfg, run.seed(PRETRAIN_SEED))?;
            let emb = embed(&out.bank, &te)?;
            let point = SweepPoint {
                modality: cohort.modalities[m].name.clone(),
                rate,
                silhouette_with_tokens: latent_eval::modality_silhouette(&emb, true)?.overall,
                silhouette_encoded: latent_eval::modality_silhouette(&emb, false)?.overall,
            };
            log::info!("sweep {} rate {rate}: silhouette {:.4}", point.modality, point.silhouette_with_tokens);
            points.push(point);
        }
    }
    run.write(SWEEP, |w| {
        writeln!(w, "modality,rate,silhouette_with_tokens,silhouette_encoded")?;
        for p in &points {
            writeln!(w, "{},{},{},{}", p.modality, p.rate, p.silhouette_with_tokens, p.silhouette_encoded)?;
        }
        Ok(())
    })?;
    Ok(points)
}
