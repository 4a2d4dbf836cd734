//! Per-modality encoders into a shared unit-sphere latent space.
//!
//! Each modality has an MLP (`Linear → LayerNorm → ReLU → Dropout → Linear →
//! LayerNorm`, then L2 normalization) and a learnable missing token. A
//! modality that is absent, or dropped by modality dropout, is represented by
//! its normalized token instead of an encoder output.

use std::fmt;
use std::path::Path;

use mga_nn::{gaussian, glorot, Graph, ParamId, ParamStore, Tensor, Var, L2_EPS, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{sign_log_scale, Cohort, ModalitySpec};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub token_std: f64,
    pub init_tau: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            hidden: 512,
            dropout: 0.3,
            token_std: 0.02,
            init_tau: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(CoreError::config("encoder.latent_dim and encoder.hidden must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config("encoder.dropout must lie in [0, 1)"));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.init_tau) {
            return Err(CoreError::config(format!("encoder.init_tau must lie in [{TAU_MIN}, {TAU_MAX}]")));
        }
        Ok(())
    }
}

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Encoded,
    MissingToken,
    Dropped,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Encoded => "ENCODED",
            Source::MissingToken => "MISSING_TOKEN",
            Source::Dropped => "DROPPED",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ENCODED" => Ok(Source::Encoded),
            "MISSING_TOKEN" => Ok(Source::MissingToken),
            "DROPPED" => Ok(Source::Dropped),
            other => Err(CoreError::data(format!("unknown embedding source {other:?}"))),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding {
    pub stay_id: u64,
    pub modality: usize,
    pub vector: Vec<f64>,
    pub source: Source,
}

/// One stay as seen by the encoders: at most one feature vector per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct StayView {
    pub stay_id: u64,
    pub features: Vec<Option<Vec<f64>>>,
}

/// All event feature vectors of one stay, grouped by modality in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct StayEvents {
    pub stay_id: u64,
    pub events: Vec<Vec<Vec<f64>>>,
}

impl StayEvents {
    /// The earliest event of every present modality.
    pub fn first_view(&self) -> StayView {
        StayView {
            stay_id: self.stay_id,
            features: self.events.iter().map(|e| e.first().cloned()).collect(),
        }
    }

    /// One uniformly drawn event of every present modality.
    pub fn random_view<R: Rng + ?Sized>(&self, rng: &mut R) -> StayView {
        StayView {
            stay_id: self.stay_id,
            features: self
                .events
                .iter()
                .map(|e| (!e.is_empty()).then(|| e[rng.gen_range(0..e.len())].clone()))
                .collect(),
        }
    }
}

/// Collects the events of the given stays, in the order given.
pub fn stay_events(cohort: &Cohort, stays: &[u64]) -> Result<Vec<StayEvents>> {
    let by_stay = cohort.records_by_stay();
    stays
        .iter()
        .map(|id| {
            let recs = by_stay
                .get(id)
                .ok_or_else(|| CoreError::data(format!("stay {id} has no records")))?;
            let mut per: Vec<Vec<(f64, &Vec<f64>)>> = vec![Vec::new(); cohort.n_modalities()];
            for r in recs {
                if let Some(f) = &r.features {
                    per[r.modality].push((r.offset_minutes, f));
                }
            }
            Ok(StayEvents {
                stay_id: *id,
                events: per
                    .into_iter()
                    .map(|mut v| {
                        v.sort_by(|a, b| a.0.total_cmp(&b.0));
                        v.into_iter().map(|(_, f)| f.clone()).collect()
                    })
                    .collect(),
            })
        })
        .collect()
}

/// `present[k][i]` is `M_{i,k}`: whether patient `k` contributes modality `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PresenceMask {
    pub present: Vec<Vec<bool>>,
}

impl PresenceMask {
    pub fn from_views(views: &[StayView]) -> Self {
        Self {
            present: views.iter().map(|v| v.features.iter().map(Option::is_some).collect()).collect(),
        }
    }

    pub fn n_patients(&self) -> usize {
        self.present.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.present.first().map_or(0, Vec::len)
    }

    pub fn get(&self, patient: usize, modality: usize) -> bool {
        self.present[patient][modality]
    }

    /// `C_k`, the number of active modalities of each patient.
    pub fn counts(&self) -> Vec<usize> {
        self.present.iter().map(|row| row.iter().filter(|&&p| p).count()).collect()
    }

    /// Independently clears each present entry with probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Self {
        Self {
            present: self
                .present
                .iter()
                .map(|row| row.iter().map(|&m| m && rng.gen::<f64>() >= p).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    g1: ParamId,
    be1: ParamId,
    w2: ParamId,
    b2: ParamId,
    g2: ParamId,
    be2: ParamId,
}

/// Encoders, missing tokens and the contrastive temperature, in one parameter store.
#[derive(Clone, Debug)]
pub struct EncoderBank {
    pub store: ParamStore,
    cfg: EncoderConfig,
    dims: Vec<usize>,
    names: Vec<String>,
    mlps: Vec<Mlp>,
    tokens: Vec<ParamId>,
    log_tau: ParamId,
}

impl EncoderBank {
    pub fn new(modalities: &[ModalitySpec], cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, d) = (cfg.hidden, cfg.latent_dim);
        let mut mlps = Vec::new();
        let mut tokens = Vec::new();
        for m in modalities {
            let p = |s: &str| format!("enc.{}.{s}", m.name);
            mlps.push(Mlp {
                w1: store.add(p("w1"), glorot(&mut rng, m.dim, h)),
                b1: store.add(p("b1"), Tensor::zeros(&[h])),
                g1: store.add(p("ln1.gamma"), Tensor::filled(&[h], 1.0)),
                be1: store.add(p("ln1.beta"), Tensor::zeros(&[h])),
                w2: store.add(p("w2"), glorot(&mut rng, h, d)),
                b2: store.add(p("b2"), Tensor::zeros(&[d])),
                g2: store.add(p("ln2.gamma"), Tensor::filled(&[d], 1.0)),
                be2: store.add(p("ln2.beta"), Tensor::zeros(&[d])),
            });
        }
        for m in modalities {
            tokens.push(store.add(format!("token.{}", m.name), gaussian(&mut rng, &[1, d], cfg.token_std)));
        }
        let log_tau = store.add("log_tau", Tensor::vector(vec![cfg.init_tau.ln()]));
        Ok(Self {
            store,
            cfg: cfg.clone(),
            dims: modalities.iter().map(|m| m.dim).collect(),
            names: modalities.iter().map(|m| m.name.clone()).collect(),
            mlps,
            tokens,
            log_tau,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn modality_names(&self) -> &[String] {
        &self.names
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.log_tau
    }

    pub fn tau(&self) -> f64 {
        self.store.value(self.log_tau).data()[0].exp()
    }

    /// Projects the temperature back into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_tau(&mut self) {
        let v = &mut self.store.value_mut(self.log_tau).data_mut()[0];
        *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    pub fn freeze(&mut self) {
        self.store.set_all_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.store.set_all_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.ids().all(|id| !self.store.is_trainable(id))
    }

    fn check_modality(&self, modality: usize) -> Result<()> {
        if modality >= self.dims.len() {
            return Err(CoreError::data(format!("modality index {modality} out of range")));
        }
        Ok(())
    }

    /// Encodes raw feature rows of one modality to unit vectors `[n, D]`.
    pub fn encode_rows<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        modality: usize,
        rows: &[&[f64]],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_modality(modality)?;
        let dim = self.dims[modality];
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(CoreError::data(format!(
                    "modality {} expects {dim} features, got {}",
                    self.names[modality],
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&x| sign_log_scale(x)));
        }
        let x = g.constant(Tensor::new(vec![rows.len(), dim], data)?);
        let p = &self.mlps[modality];
        let s = &self.store;
        let (w1, b1, g1, be1) = (g.param(s, p.w1), g.param(s, p.b1), g.param(s, p.g1), g.param(s, p.be1));
        let (w2, b2, g2, be2) = (g.param(s, p.w2), g.param(s, p.b2), g.param(s, p.g2), g.param(s, p.be2));
        let h = g.dense(x, w1, b1)?;
        let h = g.layer_norm(h, g1, be1, LAYER_NORM_EPS)?;
        let mut h = g.relu(h)?;
        if train {
            h = g.dropout(h, self.cfg.dropout, rng)?;
        }
        let h = g.dense(h, w2, b2)?;
        let h = g.layer_norm(h, g2, be2, LAYER_NORM_EPS)?;
        Ok(g.l2_normalize_rows(h, L2_EPS)?)
    }

    /// The normalized missing token `t_i / ‖t_i‖` as a `[1, D]` node.
    pub fn token(&self, g: &mut Graph, modality: usize) -> Result<Var> {
        self.check_modality(modality)?;
        let t = g.param(&self.store, self.tokens[modality]);
        Ok(g.l2_normalize_rows(t, L2_EPS)?)
    }

    /// Embeds a batch as a `[N·M, D]` node whose row `k·M + i` is patient
    /// `k`'s modality `i`: the encoder output where `mask` is set, the
    /// normalized missing token elsewhere.
    pub fn embed_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        views: &[StayView],
        mask: &PresenceMask,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let m = self.n_modalities();
        let mut blocks = Vec::new();
        let mut row_of = vec![0usize; views.len() * m];
        let mut offset = 0;
        for i in 0..m {
            let members: Vec<usize> = (0..views.len()).filter(|&k| mask.get(k, i)).collect();
            if !members.is_empty() {
                let rows = members
                    .iter()
                    .map(|&k| {
                        views[k].features[i]
                            .as_deref()
                            .ok_or_else(|| CoreError::data(format!("stay {} lacks modality {i}", views[k].stay_id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                blocks.push(self.encode_rows(g, i, &rows, train, rng)?);
                for (j, &k) in members.iter().enumerate() {
                    row_of[k * m + i] = offset + j;
                }
                offset += members.len();
            }
            blocks.push(self.token(g, i)?);
            for k in 0..views.len() {
                if !mask.get(k, i) {
                    row_of[k * m + i] = offset;
                }
            }
            offset += 1;
        }
        let all = g.concat_rows(&blocks)?;
        Ok(g.gather_rows(all, &row_of)?)
    }

    /// Embeds a batch of stays. In training mode each present modality is
    /// dropped with probability `drop_p` first; evaluation ignores `drop_p`.
    /// Returns one embedding per (stay, modality) and the effective mask.
    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        views: &[StayView],
        drop_p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<(Vec<LatentEmbedding>, PresenceMask)> {
        if !(0.0..1.0).contains(&drop_p) {
            return Err(CoreError::config(format!("modality dropout {drop_p} outside [0, 1)")));
        }
        for v in views {
            if v.features.len() != self.n_modalities() {
                return Err(CoreError::data(format!(
                    "stay {} has {} modality slots, bank has {}",
                    v.stay_id,
                    v.features.len(),
                    self.n_modalities()
                )));
            }
        }
        let observed = PresenceMask::from_views(views);
        let mask = if train { observed.dropout(drop_p, rng) } else { observed.clone() };
        let mut g = Graph::new();
        let z = self.embed_graph(&mut g, views, &mask, train, rng)?;
        let m = self.n_modalities();
        let zt = g.value(z);
        let mut out = Vec::with_capacity(views.len() * m);
        for (k, v) in views.iter().enumerate() {
            for i in 0..m {
                let source = match (observed.get(k, i), mask.get(k, i)) {
                    (true, true) => Source::Encoded,
                    (true, false) => Source::Dropped,
                    _ => Source::MissingToken,
                };
                out.push(LatentEmbedding {
                    stay_id: v.stay_id,
                    modality: i,
                    vector: zt.row(k * m + i).to_vec(),
                    source,
                });
            }
        }
        Ok((out, mask))
    }

    /// Evaluation-mode embeddings of many feature rows of one modality.
    pub fn encode_eval(&self, modality: usize, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = self.encode_rows(&mut g, modality, rows, false, &mut rng)?;
        Ok(g.value(z).to_rows())
    }

    pub fn token_vector(&self, modality: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let t = self.token(&mut g, modality)?;
        Ok(g.value(t).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.store.save(path)?)
    }

    /// Rebuilds the bank's architecture and loads its parameter values.
    pub fn load(modalities: &[ModalitySpec], cfg: &EncoderConfig, path: &Path) -> Result<Self> {
        let mut bank = Self::new(modalities, cfg, 0)?;
        bank.store.load_values(path)?;
        Ok(bank)
    }
}

/// Embeddings CSV: `stay_id,modality,source,v_0..v_{D-1}`.
pub fn write_embeddings_csv<W: std::io::Write>(embeddings: &[LatentEmbedding], names: &[String], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let d = embeddings.first().map_or(0, |e| e.vector.len());
    let mut header = vec!["stay_id".to_string(), "modality".into(), "source".into()];
    header.extend((0..d).map(|i| format!("v_{i}")));
    wr.write_record(&header)?;
    for e in embeddings {
        let mut row = vec![e.stay_id.to_string(), names[e.modality].clone(), e.source.to_string()];
        row.extend(e.vector.iter().map(|v| v.to_string()));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<R: std::io::Read>(r: R, names: &[String]) -> Result<Vec<LatentEmbedding>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let bad = |what: &str| CoreError::data(format!("embeddings CSV: bad {what}"));
        let stay_id = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("stay_id"))?;
        let modality = names
            .iter()
            .position(|n| Some(n.as_str()) == row.get(1))
            .ok_or_else(|| bad("modality"))?;
        let source = Source::parse(row.get(2).ok_or_else(|| bad("source"))?)?;
        let vector = row
            .iter()
            .skip(3)
            .map(|s| s.parse::<f64>().map_err(|_| bad("vector value")))
            .collect::<Result<_>>()?;
        out.push(LatentEmbedding { stay_id, modality, vector, source });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::ModalitySpec;

    fn bank() -> EncoderBank {
        let mods = vec![ModalitySpec::new("a", 3, false, 1.0), ModalitySpec::new("b", 2, true, 1.0)];
        let cfg = EncoderConfig { latent_dim: 8, hidden: 16, ..Default::default() };
        EncoderBank::new(&mods, &cfg, 1).unwrap()
    }

    fn view(id: u64, a: Option<Vec<f64>>, b: Option<Vec<f64>>) -> StayView {
        StayView { stay_id: id, features: vec![a, b] }
    }

    #[test]
    fn absent_modality_emits_normalized_token() {
        let bank = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views = vec![view(1, Some(vec![1.0, 2.0, 3.0]), None)];
        let (emb, _) = bank.encode_batch(&views, 0.0, false, &mut rng).unwrap();
        assert_eq!(emb[0].source, Source::Encoded);
        assert_eq!(emb[1].source, Source::MissingToken);
        let t = bank.store.value(bank.tokens[1]).data();
        let n = mga_nn::norm2(t);
        for (a, b) in emb[1].vector.iter().zip(t) {
            assert!((a - b / n).abs() < 1e-15);
        }
        for e in &emb {
            assert!((mga_nn::norm2(&e.vector) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let bank = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views = vec![view(1, Some(vec![1.0]), None)];
        assert!(matches!(bank.encode_batch(&views, 0.0, false, &mut rng), Err(CoreError::Data(_))));
    }

    #[test]
    fn freeze_round_trip() {
        let mut bank = bank();
        bank.freeze();
        assert!(bank.is_frozen());
        bank.unfreeze();
        assert!(bank.store.ids().all(|id| bank.store.is_trainable(id)));
    }
}
