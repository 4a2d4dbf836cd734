//! Synthetic multimodal cohorts with controllable missingness.
//!
//! Every stay draws a hidden latent state. Each present modality emits one or
//! more event records whose features are a noisy linear view of that state;
//! labels are thresholded linear functions of the state plus noise. Three
//! presets cover a sparse regime (single-modality stays dominate), a dense
//! regime (most stays fully observed), and a regime where the static
//! demographics modality is only weakly predictive while one time-varying
//! modality carries the signal.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CoreError, Result};

pub const N_PHENOTYPES: usize = 25;
pub const LOS_MIN_HOURS: f64 = 12.0;
pub const LOS_MAX_HOURS: f64 = 720.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    /// Static modalities emit one record at offset 0.
    #[serde(default)]
    pub is_static: bool,
    pub presence: f64,
    /// Scale of the latent state in this modality's features.
    #[serde(default = "one")]
    pub signal: f64,
    /// Standard deviation of additive feature noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Per-value missingness inside a time-varying modality, filled by carry-forward.
    #[serde(default)]
    pub value_missing_rate: f64,
    /// Standard deviation of the per-feature baseline levels of this modality.
    #[serde(default = "one")]
    pub baseline: f64,
    /// Scale of a per-stay state private to this modality, unrelated to labels.
    #[serde(default)]
    pub nuisance: f64,
}

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

impl ModalitySpec {
    pub fn new(name: &str, dim: usize, is_static: bool, presence: f64) -> Self {
        Self {
            name: name.to_string(),
            dim,
            is_static,
            presence,
            signal: 1.0,
            noise: 0.1,
            value_missing_rate: 0.0,
            baseline: 1.0,
            nuisance: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    pub mortality_prevalence: f64,
    /// Prevalence range the 25 phenotype thresholds are drawn from.
    pub phenotype_prevalence: [f64; 2],
    /// Standard deviation of the noise added to each unit-variance label score.
    pub label_noise: f64,
    /// Median length of stay in hours before clamping to [12, 720].
    pub los_median_hours: f64,
    pub los_log_scale: f64,
}

impl Default for LabelModel {
    fn default() -> Self {
        Self {
            mortality_prevalence: 0.2,
            phenotype_prevalence: [0.05, 0.4],
            label_noise: 1.0,
            los_median_hours: 72.0,
            los_log_scale: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    /// Inclusive range of stays drawn for each identified patient.
    pub stays_per_patient: [usize; 2],
    /// Fraction of patients emitted as a single stay without a patient id.
    pub orphan_fraction: f64,
    pub modalities: Vec<ModalitySpec>,
    /// Inclusive range of events drawn for each present time-varying modality.
    pub events_per_modality: [usize; 2],
    pub latent_dim: usize,
    /// Share of latent variance a stay inherits from its patient.
    pub stay_correlation: f64,
    pub label_model: LabelModel,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_patients == 0 {
            return bad("cohort.n_patients must be >= 1".into());
        }
        if self.modalities.is_empty() {
            return bad("cohort.modalities must not be empty".into());
        }
        if self.modalities.len() > 31 {
            return bad("at most 31 modalities are supported".into());
        }
        for m in &self.modalities {
            if m.dim == 0 {
                return bad(format!("modality {} has dim 0", m.name));
            }
            if !(0.0..=1.0).contains(&m.presence) {
                return bad(format!("modality {} presence {} outside [0, 1]", m.name, m.presence));
            }
            if !(0.0..1.0).contains(&m.value_missing_rate) {
                return bad(format!("modality {} value_missing_rate outside [0, 1)", m.name));
            }
            if m.noise < 0.0 || m.baseline < 0.0 || m.nuisance < 0.0 || !m.nuisance.is_finite() || !m.noise.is_finite() || !m.signal.is_finite() || !m.baseline.is_finite() {
                return bad(format!("modality {} has invalid signal/noise", m.name));
            }
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modalities.len() {
            return bad("modality names must be unique".into());
        }
        let [a, b] = self.stays_per_patient;
        if a == 0 || a > b {
            return bad(format!("cohort.stays_per_patient [{a}, {b}] is not a valid range"));
        }
        let [a, b] = self.events_per_modality;
        if a == 0 || a > b {
            return bad(format!("cohort.events_per_modality [{a}, {b}] is not a valid range"));
        }
        if !(0.0..=1.0).contains(&self.orphan_fraction) || !(0.0..=1.0).contains(&self.stay_correlation) {
            return bad("orphan_fraction and stay_correlation must lie in [0, 1]".into());
        }
        if self.latent_dim == 0 {
            return bad("cohort.latent_dim must be >= 1".into());
        }
        let lm = &self.label_model;
        let [lo, hi] = lm.phenotype_prevalence;
        let prev_ok = |p: f64| p > 0.0 && p < 1.0;
        if !prev_ok(lm.mortality_prevalence) || !prev_ok(lo) || !prev_ok(hi) || lo > hi {
            return bad("label prevalences must lie in (0, 1)".into());
        }
        if lm.label_noise < 0.0 || lm.los_log_scale < 0.0 || lm.los_median_hours <= 0.0 {
            return bad("label noise and length-of-stay parameters must be nonnegative".into());
        }
        Ok(())
    }
}

/// Named cohort presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MimicLike,
    EicuLike,
    SinkEngineered,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mimic-like" => Ok(Self::MimicLike),
            "eicu-like" => Ok(Self::EicuLike),
            "sink-engineered" => Ok(Self::SinkEngineered),
            other => Err(CoreError::config(format!(
                "unknown preset {other:?} (expected mimic-like, eicu-like or sink-engineered)"
            ))),
        }
    }

    pub fn config(self, n_patients: usize, seed: u64) -> GeneratorConfig {
        match self {
            Self::MimicLike => mimic_like(n_patients, seed),
            Self::EicuLike => eicu_like(n_patients, seed),
            Self::SinkEngineered => sink_engineered(n_patients, seed),
        }
    }
}

/// Heavy missingness: most stays carry a single modality.
pub fn mimic_like(n_patients: usize, seed: u64) -> GeneratorConfig {
    let mut ts = ModalitySpec::new("timeseries", 24, false, 0.6);
    ts.value_missing_rate = 0.2;
    GeneratorConfig {
        n_patients,
        stays_per_patient: [1, 3],
        orphan_fraction: 0.1,
        modalities: vec![
            ts,
            ModalitySpec::new("cxr", 32, false, 0.25),
            ModalitySpec::new("discharge_notes", 32, false, 0.2),
            ModalitySpec::new("radiology_notes", 32, false, 0.25),
            ModalitySpec::new("demographics", 8, true, 0.2),
        ],
        events_per_modality: [1, 4],
        latent_dim: 16,
        stay_correlation: 0.5,
        label_model: LabelModel::default(),
        seed,
    }
}

/// Dense tabular regime: most stays observe every modality.
pub fn eicu_like(n_patients: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_patients,
        stays_per_patient: [1, 2],
        orphan_fraction: 0.05,
        modalities: vec![
            ModalitySpec::new("demographics", 8, true, 0.98),
            ModalitySpec::new("diagnosis", 24, false, 0.93),
            ModalitySpec::new("treatment", 24, false, 0.93),
            ModalitySpec::new("medication", 24, false, 0.93),
            ModalitySpec::new("lab", 24, false, 0.95),
            ModalitySpec::new("aps", 16, true, 0.95),
        ],
        events_per_modality: [1, 4],
        latent_dim: 16,
        stay_correlation: 0.5,
        label_model: LabelModel::default(),
        seed,
    }
}

/// Demographics (static, offset 0) is a weak, noisy view of the state while
/// `labs` carries it cleanly; `notes` is mostly noise.
pub fn sink_engineered(n_patients: usize, seed: u64) -> GeneratorConfig {
    let mut demo = ModalitySpec::new("demographics", 8, true, 1.0);
    demo.signal = 0.5;
    demo.noise = 0.5;
    let labs = ModalitySpec::new("labs", 24, false, 1.0);
    let mut notes = ModalitySpec::new("notes", 24, false, 0.5);
    notes.signal = 0.3;
    notes.noise = 1.0;
    GeneratorConfig {
        n_patients,
        stays_per_patient: [1, 2],
        orphan_fraction: 0.1,
        modalities: vec![demo, labs, notes],
        events_per_modality: [1, 4],
        latent_dim: 16,
        stay_correlation: 0.5,
        label_model: LabelModel::default(),
        seed,
    }
}

/// One patient stay's record for one modality, or an explicit absence marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRecord {
    /// `None` marks an orphan stay without a unifying patient id.
    pub patient_id: Option<u64>,
    pub stay_id: u64,
    pub modality: usize,
    pub offset_minutes: f64,
    /// `None` means the modality is ABSENT for this stay.
    pub features: Option<Vec<f64>>,
}

impl ModalityRecord {
    pub fn is_absent(&self) -> bool {
        self.features.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StayLabels {
    pub mortality: u8,
    pub phenotypes: Vec<u8>,
    pub los_hours: f64,
}

/// A generated (or loaded) cohort: the modality schema, all records, and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub modalities: Vec<ModalitySpec>,
    pub records: Vec<ModalityRecord>,
    pub labels: BTreeMap<u64, StayLabels>,
}

impl Cohort {
    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Records grouped by stay, in stay-id order.
    pub fn records_by_stay(&self) -> BTreeMap<u64, Vec<&ModalityRecord>> {
        let mut out: BTreeMap<u64, Vec<&ModalityRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.stay_id).or_default().push(r);
        }
        out
    }

    pub fn stay_ids(&self) -> Vec<u64> {
        self.labels.keys().copied().collect()
    }

    /// Bit `i` is set when modality `i` has at least one non-absent record.
    pub fn presence_masks(&self) -> BTreeMap<u64, u32> {
        let mut out: BTreeMap<u64, u32> = BTreeMap::new();
        for r in &self.records {
            let e = out.entry(r.stay_id).or_insert(0);
            if !r.is_absent() {
                *e |= 1 << r.modality;
            }
        }
        out
    }

    /// Patient id of every stay (`None` for orphans).
    pub fn patients(&self) -> BTreeMap<u64, Option<u64>> {
        self.records.iter().map(|r| (r.stay_id, r.patient_id)).collect()
    }
}

/// `sgn(x) · ln(1 + |x|)`.
pub fn sign_log_scale(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p() * if x == 0.0 { 0.0 } else { 1.0 }
}

/// Fills missing bins with the most recent observation, or `global_normal`
/// before the first one.
pub fn carry_forward_impute(series: &[(i64, Option<f64>)], global_normal: f64) -> Result<Vec<(i64, f64)>> {
    if series.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(CoreError::data("carry-forward imputation needs bins sorted ascending"));
    }
    let mut last = None;
    Ok(series
        .iter()
        .map(|&(bin, v)| {
            if v.is_some() {
                last = v;
            }
            (bin, last.unwrap_or(global_normal))
        })
        .collect())
}

enum PresenceSampler {
    /// Independent Bernoulli draws; stays with nothing present are dropped.
    Independent(Vec<f64>),
    /// One anchor modality is always present, the rest are independent. The
    /// anchor and residual rates are solved so each marginal equals its
    /// configured presence probability while every stay keeps a modality.
    Anchored { anchor: Vec<f64>, rest: Vec<f64> },
}

impl PresenceSampler {
    fn new(p: &[f64]) -> Result<Self> {
        let total: f64 = p.iter().sum();
        if total == 0.0 {
            return Err(CoreError::data("every presence probability is 0: no stay can be retained"));
        }
        if total < 1.0 || p.iter().any(|&v| v >= 1.0) {
            return Ok(Self::Independent(p.to_vec()));
        }
        let mass = |r: f64| p.iter().map(|&pi| ((pi - r) / (1.0 - r)).max(0.0)).sum::<f64>();
        let (mut lo, mut hi) = (0.0, p.iter().cloned().fold(0.0, f64::max));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass(mid) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        let mut anchor: Vec<f64> = p.iter().map(|&pi| ((pi - r) / (1.0 - r)).max(0.0)).collect();
        let s: f64 = anchor.iter().sum();
        anchor.iter_mut().for_each(|q| *q /= s);
        let rest = p.iter().map(|&pi| pi.min(r)).collect();
        Ok(Self::Anchored { anchor, rest })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        match self {
            Self::Independent(p) => p.iter().map(|&pi| rng.gen::<f64>() < pi).collect(),
            Self::Anchored { anchor, rest } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut a = anchor.len() - 1;
                for (i, q) in anchor.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        a = i;
                        break;
                    }
                }
                rest.iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let draw = rng.gen::<f64>() < r;
                        i == a || draw
                    })
                    .collect()
            }
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed random structure of one synthetic world: modality views and label directions.
struct World {
    views: Vec<Vec<Vec<f64>>>,
    levels: Vec<Vec<f64>>,
    private: Vec<Vec<Vec<f64>>>,
    mortality_dir: Vec<f64>,
    mortality_threshold: f64,
    pheno_dirs: Vec<Vec<f64>>,
    pheno_thresholds: Vec<f64>,
    los_dir: Vec<f64>,
}

impl World {
    fn new(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.latent_dim;
        let views = cfg
            .modalities
            .iter()
            .map(|m| {
                (0..m.dim)
                    .map(|_| (0..d).map(|_| normal(rng) / (d as f64).sqrt()).collect())
                    .collect()
            })
            .collect();
        let lm = &cfg.label_model;
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let spread = (1.0 + lm.label_noise * lm.label_noise).sqrt();
        let threshold = |prev: f64| spread * std_normal.inverse_cdf(1.0 - prev);
        let mortality_dir = unit_vector(rng, d);
        let mut pheno_dirs = Vec::with_capacity(N_PHENOTYPES);
        let mut pheno_thresholds = Vec::with_capacity(N_PHENOTYPES);
        for _ in 0..N_PHENOTYPES {
            pheno_dirs.push(unit_vector(rng, d));
            let [lo, hi] = lm.phenotype_prevalence;
            pheno_thresholds.push(threshold(rng.gen_range(lo..=hi)));
        }
        let los_dir = unit_vector(rng, d);
        let levels = cfg
            .modalities
            .iter()
            .map(|m| (0..m.dim).map(|_| m.baseline * normal(rng)).collect())
            .collect();
        let private = cfg
            .modalities
            .iter()
            .map(|m| {
                (0..m.dim)
                    .map(|_| (0..d).map(|_| normal(rng) / (d as f64).sqrt()).collect())
                    .collect()
            })
            .collect();
        Self {
            views,
            levels,
            private,
            mortality_dir,
            mortality_threshold: threshold(lm.mortality_prevalence),
            pheno_dirs,
            pheno_thresholds,
            los_dir,
        }
    }

    fn labels(&self, lm: &LabelModel, s: &[f64], rng: &mut ChaCha8Rng) -> StayLabels {
        let mortality = u8::from(dot(&self.mortality_dir, s) + lm.label_noise * normal(rng) > self.mortality_threshold);
        let phenotypes = self
            .pheno_dirs
            .iter()
            .zip(&self.pheno_thresholds)
            .map(|(dir, &t)| u8::from(dot(dir, s) + lm.label_noise * normal(rng) > t))
            .collect();
        let log_los = lm.los_median_hours.ln() + lm.los_log_scale * (dot(&self.los_dir, s) + 0.2 * normal(rng));
        StayLabels {
            mortality,
            phenotypes,
            los_hours: log_los.exp().clamp(LOS_MIN_HOURS, LOS_MAX_HOURS),
        }
    }

    fn features(&self, spec: &ModalitySpec, m: usize, s: &[f64], private: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.views[m]
            .iter()
            .zip(&self.levels[m])
            .zip(&self.private[m])
            .map(|((row, level), prow)| {
                let own = if spec.nuisance > 0.0 { spec.nuisance * dot(prow, private) } else { 0.0 };
                level + spec.signal * dot(row, s) + own + spec.noise * normal(rng)
            })
            .collect()
    }
}

/// The hidden latent state of one stay, exposed for sanity probes.
#[derive(Clone, Debug)]
pub struct LatentStates {
    pub by_stay: BTreeMap<u64, Vec<f64>>,
}

/// Generates a cohort. Pure function of the config.
pub fn generate(cfg: &GeneratorConfig) -> Result<Cohort> {
    generate_with_latents(cfg).map(|(c, _)| c)
}

pub fn generate_with_latents(cfg: &GeneratorConfig) -> Result<(Cohort, LatentStates)> {
    cfg.validate()?;
    let presence: Vec<f64> = cfg.modalities.iter().map(|m| m.presence).collect();
    let sampler = PresenceSampler::new(&presence)?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_a11_da7a);
    let world = World::new(cfg, &mut world_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let d = cfg.latent_dim;
    let rho = cfg.stay_correlation;
    let mut records = Vec::new();
    let mut labels = BTreeMap::new();
    let mut latents = BTreeMap::new();
    let mut next_stay = 1u64;

    for patient in 1..=cfg.n_patients as u64 {
        let orphan = rng.gen::<f64>() < cfg.orphan_fraction;
        let n_stays = if orphan {
            1
        } else {
            rng.gen_range(cfg.stays_per_patient[0]..=cfg.stays_per_patient[1])
        };
        let base: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        for _ in 0..n_stays {
            let s: Vec<f64> = base
                .iter()
                .map(|&b| rho.sqrt() * b + (1.0 - rho).sqrt() * normal(&mut rng))
                .collect();
            let present = sampler.draw(&mut rng);
            let stay_labels = world.labels(&cfg.label_model, &s, &mut rng);
            if !present.iter().any(|&p| p) {
                continue;
            }
            let stay_id = next_stay;
            next_stay += 1;
            let patient_id = (!orphan).then_some(patient);
            let stay_minutes = stay_labels.los_hours * 60.0;
            for (m, spec) in cfg.modalities.iter().enumerate() {
                if !present[m] {
                    records.push(ModalityRecord {
                        patient_id,
                        stay_id,
                        modality: m,
                        offset_minutes: 0.0,
                        features: None,
                    });
                    continue;
                }
                let private: Vec<f64> = if spec.nuisance > 0.0 {
                    (0..d).map(|_| normal(&mut rng)).collect()
                } else {
                    Vec::new()
                };
                if spec.is_static {
                    records.push(ModalityRecord {
                        patient_id,
                        stay_id,
                        modality: m,
                        offset_minutes: 0.0,
                        features: Some(world.features(spec, m, &s, &private, &mut rng)),
                    });
                    continue;
                }
                let n_events = rng.gen_range(cfg.events_per_modality[0]..=cfg.events_per_modality[1]);
                let mut offsets: Vec<f64> = (0..n_events).map(|_| rng.gen::<f64>() * stay_minutes).collect();
                offsets.sort_by(f64::total_cmp);
                let mut feats: Vec<Vec<f64>> = (0..n_events).map(|_| world.features(spec, m, &s, &private, &mut rng)).collect();
                if spec.value_missing_rate > 0.0 {
                    for j in 0..spec.dim {
                        let series: Vec<(i64, Option<f64>)> = feats
                            .iter()
                            .enumerate()
                            .map(|(e, f)| {
                                let missing = rng.gen::<f64>() < spec.value_missing_rate;
                                (e as i64, (!missing).then_some(f[j]))
                            })
                            .collect();
                        for (e, (_, v)) in carry_forward_impute(&series, world.levels[m][j])?.into_iter().enumerate() {
                            feats[e][j] = v;
                        }
                    }
                }
                for (off, f) in offsets.into_iter().zip(feats) {
                    records.push(ModalityRecord {
                        patient_id,
                        stay_id,
                        modality: m,
                        offset_minutes: off,
                        features: Some(f),
                    });
                }
            }
            labels.insert(stay_id, stay_labels);
            latents.insert(stay_id, s);
        }
    }
    if labels.is_empty() {
        return Err(CoreError::data("generation retained zero stays"));
    }
    Ok((
        Cohort {
            modalities: cfg.modalities.clone(),
            records,
            labels,
        },
        LatentStates { by_stay: latents },
    ))
}

#[derive(Serialize, Deserialize)]
struct RecordLine<'a> {
    patient_id: Option<u64>,
    stay_id: u64,
    modality: std::borrow::Cow<'a, str>,
    offset_minutes: f64,
    features: Option<std::borrow::Cow<'a, [f64]>>,
}

/// Writes one JSON object per record.
pub fn write_records_jsonl<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    for r in &cohort.records {
        let line = RecordLine {
            patient_id: r.patient_id,
            stay_id: r.stay_id,
            modality: cohort.modalities[r.modality].name.as_str().into(),
            offset_minutes: r.offset_minutes,
            features: r.features.as_deref().map(Into::into),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(modalities: &[ModalitySpec], r: R) -> Result<Vec<ModalityRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)?;
        let modality = modalities
            .iter()
            .position(|m| m.name == rec.modality)
            .ok_or_else(|| CoreError::data(format!("line {}: unknown modality {:?}", lineno + 1, rec.modality)))?;
        if let Some(f) = &rec.features {
            if f.len() != modalities[modality].dim {
                return Err(CoreError::data(format!(
                    "line {}: {} features for modality {} of dim {}",
                    lineno + 1,
                    f.len(),
                    rec.modality,
                    modalities[modality].dim
                )));
            }
        }
        out.push(ModalityRecord {
            patient_id: rec.patient_id,
            stay_id: rec.stay_id,
            modality,
            offset_minutes: rec.offset_minutes,
            features: rec.features.map(|f| f.into_owned()),
        });
    }
    Ok(out)
}

/// Labels CSV: `stay_id,mortality,pheno_0..pheno_24,los_hours`.
pub fn write_labels_csv<W: Write>(labels: &BTreeMap<u64, StayLabels>, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["stay_id".to_string(), "mortality".to_string()];
    header.extend((0..N_PHENOTYPES).map(|i| format!("pheno_{i}")));
    header.push("los_hours".into());
    wr.write_record(&header)?;
    for (stay, l) in labels {
        let mut row = vec![stay.to_string(), l.mortality.to_string()];
        row.extend(l.phenotypes.iter().map(|p| p.to_string()));
        row.push(l.los_hours.to_string());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_labels_csv<R: std::io::Read>(r: R) -> Result<BTreeMap<u64, StayLabels>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = BTreeMap::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != N_PHENOTYPES + 3 {
            return Err(CoreError::data(format!("labels row has {} fields", row.len())));
        }
        let parse_u8 = |s: &str| s.parse::<u8>().map_err(|e| CoreError::data(format!("bad label {s:?}: {e}")));
        let stay = row[0].parse::<u64>().map_err(|e| CoreError::data(format!("bad stay id: {e}")))?;
        let mortality = parse_u8(&row[1])?;
        let phenotypes = (0..N_PHENOTYPES).map(|i| parse_u8(&row[2 + i])).collect::<Result<_>>()?;
        let los_hours = row[N_PHENOTYPES + 2]
            .parse::<f64>()
            .map_err(|e| CoreError::data(format!("bad los: {e}")))?;
        out.insert(stay, StayLabels { mortality, phenotypes, los_hours });
    }
    Ok(out)
}

pub fn write_schema(modalities: &[ModalitySpec], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(modalities)?)?;
    Ok(())
}

pub fn read_schema(path: &Path) -> Result<Vec<ModalitySpec>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
