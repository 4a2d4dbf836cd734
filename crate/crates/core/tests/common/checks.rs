//! Oracle and gradient checks shared by the integration tests and the
//! acceptance harness. Each check returns what it measured; callers decide
//! the tolerance.

use mga_core::align::{masked_infonce, masked_infonce_graph};
use mga_core::cohort::{ModalitySpec, StayLabels};
use mga_core::decoder::{forward_with_attention, slot_logits, task_loss, Decoder, Task, TaskWeights};
use mga_core::encoder::{EncoderBank, EncoderConfig, PresenceMask, StayView};
use mga_core::metrics::{ace, auprc, auroc, bss, pearson, spearman};
use mga_core::timeline::{attach_embeddings, EventTimeline};
use mga_nn::{grad_check_inputs, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_accumulated, coordinate_name, random_labels, random_timeline, rng, small_bank, small_decoder};

/// Worst relative error of a gradient check series and where it occurred.
#[derive(Clone, Debug, Default)]
pub struct GradSummary {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradSummary {
    fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = at();
        }
    }
}

/// Oracle comparison: largest absolute difference over the cases where both
/// sides are defined, and cases where only one side is.
#[derive(Clone, Debug, Default)]
pub struct OracleSummary {
    pub compared: usize,
    pub max_abs_error: f64,
    pub definedness_mismatches: usize,
}

impl OracleSummary {
    fn compare(&mut self, got: Option<f64>, want: Option<f64>) {
        match (got, want) {
            (Some(a), Some(b)) => {
                self.compared += 1;
                self.max_abs_error = self.max_abs_error.max((a - b).abs());
            }
            (None, None) => {}
            _ => self.definedness_mismatches += 1,
        }
    }

    pub fn within(&self, tol: f64) -> bool {
        self.definedness_mismatches == 0 && self.max_abs_error <= tol
    }
}

// ---- masked InfoNCE -------------------------------------------------------

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn normalized_sum(vs: &[&Vec<f64>]) -> Vec<f64> {
    let d = vs[0].len();
    let mut s = vec![0.0; d];
    for v in vs {
        for (a, b) in s.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    s.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Term-by-term masked InfoNCE: `z[k][i]`, `present[k][i]`.
pub fn naive_infonce(z: &[Vec<Vec<f64>>], present: &[Vec<bool>], tau: f64) -> Option<f64> {
    let n = z.len();
    let m = z[0].len();
    let count = |k: usize| present[k].iter().filter(|&&p| p).count();
    let mut per_mod = Vec::new();
    for i in 0..m {
        let anchors: Vec<usize> = (0..n).filter(|&k| present[k][i] && count(k) >= 2).collect();
        if anchors.is_empty() {
            continue;
        }
        let mut li = 0.0;
        for &k in &anchors {
            let others: Vec<&Vec<f64>> = (0..m).filter(|&j| j != i && present[k][j]).map(|j| &z[k][j]).collect();
            let c = normalized_sum(&others);
            let pos = (dot(&z[k][i], &c) / tau).exp();
            let mut denom = pos;
            for other in 0..n {
                if other == k || count(other) == 0 {
                    continue;
                }
                let comp: Vec<&Vec<f64>> =
                    (0..m).filter(|&j| j != i && present[other][j]).map(|j| &z[other][j]).collect();
                let v = if comp.is_empty() {
                    let all: Vec<&Vec<f64>> = (0..m).filter(|&j| present[other][j]).map(|j| &z[other][j]).collect();
                    normalized_sum(&all)
                } else {
                    normalized_sum(&comp)
                };
                denom += (dot(&z[k][i], &v) / tau).exp();
            }
            li += -(pos / denom).ln();
        }
        per_mod.push(li / anchors.len() as f64);
    }
    let active = (0..n).filter(|&k| count(k) >= 1).count();
    if per_mod.is_empty() || active < 2 {
        return None;
    }
    Some(per_mod.iter().sum::<f64>() / per_mod.len() as f64)
}

/// Random unit embeddings with N <= 16 patients, M <= 6 modalities and
/// random presence.
pub fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<bool>>, f64) {
    let n = rng.gen_range(1..=16);
    let m = rng.gen_range(1..=6);
    let d = rng.gen_range(2..=8);
    let rate: f64 = rng.gen_range(0.2..0.9);
    let z = (0..n).map(|_| (0..m).map(|_| unit(rng, d)).collect()).collect();
    let present = (0..n).map(|_| (0..m).map(|_| rng.gen::<f64>() < rate).collect()).collect();
    (z, present, rng.gen_range(0.05..2.0))
}

pub fn mask_of(present: &[Vec<bool>]) -> PresenceMask {
    PresenceMask { present: present.to_vec() }
}

/// `masked_infonce` against [`naive_infonce`] on random batches. Also
/// returns how many single-modality patients the batches contained.
pub fn infonce_oracle(batches: usize) -> (OracleSummary, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = OracleSummary::default();
    let mut single_modality = 0;
    for _ in 0..batches {
        let (z, present, tau) = random_batch(&mut rng);
        single_modality += present.iter().filter(|p| p.iter().filter(|&&x| x).count() == 1).count();
        let got = masked_infonce(&z, &mask_of(&present), tau).unwrap().map(|r| r.0);
        out.compare(got, naive_infonce(&z, &present, tau));
    }
    (out, single_modality)
}

/// Loss gradients with respect to raw embeddings and `log_tau`.
pub fn infonce_input_grads(seeds: u64) -> GradSummary {
    let mut out = GradSummary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, d) = (rng.gen_range(2..=8), rng.gen_range(2..=5), rng.gen_range(2..=5));
        let rows: Vec<Vec<f64>> = (0..n * m).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let mut present: Vec<Vec<bool>> = (0..n).map(|_| (0..m).map(|_| rng.gen::<f64>() < 0.6).collect()).collect();
        present[0] = vec![true; m];
        present[1][0] = true;
        let mask = mask_of(&present);
        let tau: f64 = rng.gen_range(0.1..1.0);
        let inputs = [Tensor::from_rows(&rows).unwrap(), Tensor::vector(vec![tau.ln()])];
        let report = grad_check_inputs(&inputs, 1e-5, |g, v| {
            let z = g.l2_normalize_rows(v[0], 1e-12)?;
            Ok(masked_infonce_graph(g, z, &mask, v[1]).unwrap().expect("patient 0 anchors every modality").loss)
        })
        .unwrap();
        out.record(report.max_rel_error, || format!("seed {seed} ({n}x{m}x{d})"));
    }
    out
}

fn alignment_bank(seed: u64) -> (EncoderBank, Vec<ModalitySpec>) {
    let mods = vec![
        ModalitySpec::new("a", 3, false, 1.0),
        ModalitySpec::new("b", 4, false, 1.0),
        ModalitySpec::new("c", 2, true, 1.0),
    ];
    let cfg = EncoderConfig { latent_dim: 4, hidden: 5, dropout: 0.0, token_std: 0.02, init_tau: 0.3 };
    (EncoderBank::new(&mods, &cfg, seed).unwrap(), mods)
}

fn bank_loss(bank: &EncoderBank, views: &[StayView], mask: &PresenceMask) -> (Graph, Var) {
    let mut g = Graph::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let z = bank.embed_graph(&mut g, views, mask, false, &mut r).unwrap();
    let lt = g.param(&bank.store, bank.log_tau_id());
    let loss = masked_infonce_graph(&mut g, z, mask, lt).unwrap().expect("stay 0 anchors every modality").loss;
    (g, loss)
}

/// Encoder parameters through normalization to the alignment loss, on
/// `count` seeds whose ReLU inputs stay at least 1e-3 from the kink.
pub fn encoder_loss_grads(count: usize) -> GradSummary {
    let mut out = GradSummary::default();
    let mut seed = 0u64;
    while out.checked < count {
        seed += 1;
        assert!(seed < 4 * count as u64 + 100, "too few seeds satisfy the ReLU margin precondition");
        let (mut bank, mods) = alignment_bank(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views: Vec<StayView> = (0..4u64)
            .map(|k| StayView {
                stay_id: k,
                features: mods
                    .iter()
                    .map(|s| {
                        (k == 0 || rng.gen::<f64>() < 0.7)
                            .then(|| (0..s.dim).map(|_| rng.sample(StandardNormal)).collect())
                    })
                    .collect(),
            })
            .collect();
        let mask = PresenceMask::from_views(&views);
        bank.store.zero_grad();
        let (g, loss) = bank_loss(&bank, &views, &mask);
        if g.min_relu_margin().is_some_and(|m| m < 1e-3) {
            continue;
        }
        let grads = g.backward(loss).unwrap();
        g.accumulate_into(&grads, &mut bank.store);
        let report = check_accumulated(&bank.store, 1e-5, |s| {
            let mut b = bank.clone();
            b.store = s.clone();
            let (g, l) = bank_loss(&b, &views, &mask);
            g.scalar(l)
        });
        out.record(report.max_rel_error, || {
            let at = report.worst.as_ref().map(|w| coordinate_name(&bank.store, w.1));
            format!("seed {seed} at {at:?}")
        });
    }
    out
}

// ---- task losses and decoder ---------------------------------------------

fn neg_log_sigmoid(x: f64) -> f64 {
    -(1.0 / (1.0 + (-x).exp())).ln()
}

/// Per-slot loss summed over classes, averaged over each stay's slots, then
/// over stays.
pub fn naive_task_loss(task: Task, w: &[f64], out: &[Vec<f64>], slots: &[usize], labels: &[&StayLabels]) -> f64 {
    let mut row = 0;
    let mut total = 0.0;
    for (&n, l) in slots.iter().zip(labels) {
        let target: Vec<f64> = match task {
            Task::Mortality => vec![f64::from(l.mortality)],
            Task::Phenotyping => l.phenotypes.iter().map(|&p| f64::from(p)).collect(),
            Task::Los => vec![(1.0 + l.los_hours).ln()],
        };
        let mut stay = 0.0;
        for _ in 0..n {
            for (c, &y) in target.iter().enumerate() {
                let x = out[row][c];
                stay += match task {
                    Task::Los => (x - y) * (x - y),
                    _ => w[c] * y * neg_log_sigmoid(x) + (1.0 - y) * neg_log_sigmoid(-x),
                };
            }
            row += 1;
        }
        total += stay / n as f64;
    }
    total / slots.len() as f64
}

/// `task_loss` against [`naive_task_loss`], cycling through the tasks.
/// Errors are relative to `max(|loss|, 1)`.
pub fn task_loss_oracle(cases: usize) -> OracleSummary {
    let mut r = rng(5);
    let mut out = OracleSummary::default();
    for case in 0..cases {
        let task = Task::ALL[case % 3];
        let b = r.gen_range(1..6);
        let slots: Vec<usize> = (0..b).map(|_| r.gen_range(1..8)).collect();
        let labels: Vec<StayLabels> = (0..b).map(|_| random_labels(&mut r)).collect();
        let refs: Vec<&StayLabels> = labels.iter().collect();
        let rows: usize = slots.iter().sum();
        let logits: Vec<Vec<f64>> =
            (0..rows).map(|_| (0..task.out_dim()).map(|_| r.gen_range(-6.0..6.0)).collect()).collect();
        let weights = TaskWeights { pos_weight: (0..task.out_dim()).map(|_| r.gen_range(0.2..50.0)).collect() };
        let mut g = Graph::new();
        let o = g.constant(Tensor::from_rows(&logits).unwrap());
        let loss = task_loss(&mut g, task, &weights, o, &slots, &refs).unwrap();
        let want = naive_task_loss(task, &weights.pos_weight, &logits, &slots, &refs);
        let scale = want.abs().max(1.0);
        out.compare(Some(g.scalar(loss) / scale), Some(want / scale));
    }
    out
}

fn with_masks(r: &mut ChaCha8Rng, mut t: EventTimeline) -> EventTimeline {
    for e in t.events.iter_mut() {
        e.masked = r.gen::<f64>() < 0.2;
    }
    t
}

fn batch_loss(decoder: &Decoder, bank: &EncoderBank, batch: &[EventTimeline], w: &TaskWeights) -> (Graph, Var) {
    let mut g = Graph::new();
    let refs: Vec<&EventTimeline> = batch.iter().collect();
    let labels: Vec<&StayLabels> = batch.iter().map(|t| &t.labels).collect();
    let f = decoder.forward(&mut g, bank, &refs, false, &mut rng(0)).unwrap();
    let loss = task_loss(&mut g, decoder.task(), w, f.outputs, &f.slots, &labels).unwrap();
    (g, loss)
}

fn weights(task: Task, r: &mut ChaCha8Rng) -> TaskWeights {
    TaskWeights { pos_weight: (0..task.out_dim()).map(|_| r.gen_range(0.5..5.0)).collect() }
}

/// Every decoder parameter through the task loss over a frozen encoder
/// bank, cycling through the tasks.
pub fn decoder_grads(seeds: u64) -> GradSummary {
    let mut out = GradSummary::default();
    for seed in 0..seeds {
        let task = Task::ALL[seed as usize % 3];
        let mut r = rng(seed);
        let mut bank = small_bank(seed);
        bank.freeze();
        let mut batch: Vec<EventTimeline> = (0..2)
            .map(|k| {
                let n = r.gen_range(1..5);
                let t = random_timeline(&mut r, k, n, k == 0);
                with_masks(&mut r, t)
            })
            .collect();
        attach_embeddings(&bank, &mut batch).unwrap();
        let w = weights(task, &mut r);
        let mut decoder = small_decoder(task, seed);
        let (g, loss) = batch_loss(&decoder, &bank, &batch, &w);
        let grads = g.backward(loss).unwrap();
        g.accumulate_into(&grads, &mut decoder.store);
        let report = check_accumulated(&decoder.store, 1e-5, |s| {
            let mut d = decoder.clone();
            d.store = s.clone();
            let (g, l) = batch_loss(&d, &bank, &batch, &w);
            g.scalar(l)
        });
        out.record(report.max_rel_error, || {
            let at = report.worst.as_ref().map(|w| coordinate_name(&decoder.store, w.1));
            format!("seed {seed} {task:?} at {at:?}")
        });
    }
    out
}

/// Trainable encoder parameters through the decoder and task loss, on
/// `count` seeds whose ReLU inputs stay at least 1e-3 from the kink.
pub fn scratch_bank_grads(count: usize) -> GradSummary {
    let mut out = GradSummary::default();
    let mut seed = 0u64;
    while out.checked < count {
        seed += 1;
        assert!(seed < 4 * count as u64 + 100, "too few seeds satisfy the ReLU margin precondition");
        let task = Task::ALL[seed as usize % 3];
        let mut r = rng(seed);
        let mut bank = small_bank(seed);
        let batch: Vec<EventTimeline> = (0..2)
            .map(|k| {
                let t = random_timeline(&mut r, k, 3, true);
                with_masks(&mut r, t)
            })
            .collect();
        let w = weights(task, &mut r);
        let decoder = small_decoder(task, seed + 1000);
        let (g, loss) = batch_loss(&decoder, &bank, &batch, &w);
        if g.min_relu_margin().is_some_and(|m| m < 1e-3) {
            continue;
        }
        let grads = g.backward(loss).unwrap();
        g.accumulate_into(&grads, &mut bank.store);
        let report = check_accumulated(&bank.store, 1e-5, |s| {
            let mut b = bank.clone();
            b.store = s.clone();
            let (g, l) = batch_loss(&decoder, &b, &batch, &w);
            g.scalar(l)
        });
        out.record(report.max_rel_error, || {
            let at = report.worst.as_ref().map(|w| coordinate_name(&bank.store, w.1));
            format!("seed {seed} {task:?} at {at:?}")
        });
    }
    out
}

/// Decoder attention invariants over random stays.
#[derive(Clone, Debug, Default)]
pub struct CausalitySummary {
    pub stays: usize,
    /// Largest attention weight above the diagonal.
    pub max_future_weight: f64,
    pub max_row_sum_error: f64,
    /// Stays whose earlier slot logits changed after mutating or appending
    /// later events.
    pub future_leaks: usize,
    /// Stays whose later slot logits did not react to the mutation.
    pub inert_mutations: usize,
}

pub fn causality(seeds: u64) -> CausalitySummary {
    let mut out = CausalitySummary::default();
    for seed in 0..seeds {
        let mut r = rng(seed);
        let bank = small_bank(seed);
        let decoder = small_decoder(Task::ALL[seed as usize % 3], seed);
        let n = r.gen_range(2..12);
        let t = random_timeline(&mut r, 0, n, seed % 2 == 0);
        let (_, w) = forward_with_attention(&decoder, &bank, &t).unwrap();
        let (h, len) = (w.shape()[0], w.shape()[1]);
        for head in 0..h {
            for i in 0..len {
                let row = &w.data()[(head * len + i) * len..(head * len + i + 1) * len];
                out.max_future_weight = row[i + 1..].iter().fold(out.max_future_weight, |a, &x| a.max(x.abs()));
                out.max_row_sum_error = out.max_row_sum_error.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let cut = r.gen_range(0..t.n_events() - 1);
        let mut future = t.clone();
        for e in future.events.iter_mut().skip(cut + 1) {
            e.features.iter_mut().for_each(|x| *x = r.gen_range(-50.0..50.0));
            e.masked = r.gen();
        }
        let extra = random_timeline(&mut r, 0, 3, false);
        let last = future.events.last().unwrap().offset_minutes;
        for mut e in extra.events {
            e.id = future.events.len();
            e.offset_minutes += last;
            future.events.push(e);
        }
        let a = slot_logits(&decoder, &bank, &t).unwrap();
        let b = slot_logits(&decoder, &bank, &future).unwrap();
        let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&a[..=cut]) != bits(&b[..=cut]) {
            out.future_leaks += 1;
        }
        if a[cut + 1..] == b[cut + 1..t.n_events()] {
            out.inert_mutations += 1;
        }
        out.stays += 1;
    }
    out
}

// ---- evaluation metrics ---------------------------------------------------

pub const METRIC_ALPHABET: [f64; 4] = [0.1, 0.4, 0.6, 0.9];

fn naive_auroc(s: &[f64], y: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn naive_auprc(s: &[f64], y: &[u8]) -> Option<f64> {
    let pos = y.iter().filter(|&&l| l == 1).count() as f64;
    if pos == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut last_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = (0..s.len()).filter(|&i| s[i] >= t && y[i] == 1).count() as f64;
        let called = (0..s.len()).filter(|&i| s[i] >= t).count() as f64;
        let recall = tp / pos;
        ap += (recall - last_recall) * (tp / called);
        last_recall = recall;
    }
    Some(ap)
}

fn naive_ace(p: &[f64], y: &[u8], bins: usize) -> f64 {
    let n = p.len();
    let bins = bins.min(n);
    let mut order: Vec<(f64, usize)> = p.iter().copied().zip(0..).collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b * n / bins, (b + 1) * n / bins);
        let (mut conf, mut acc) = (0.0, 0.0);
        for &(prob, i) in &order[lo..hi] {
            conf += prob;
            acc += f64::from(y[i]);
        }
        let m = (hi - lo) as f64;
        total += (conf / m - acc / m).abs();
    }
    total / bins as f64
}

fn naive_bss(p: &[f64], y: &[u8]) -> Option<f64> {
    let n = y.len() as f64;
    let prev = y.iter().map(|&l| f64::from(l)).sum::<f64>() / n;
    if prev == 0.0 || prev == 1.0 {
        return None;
    }
    let brier: f64 = p.iter().zip(y).map(|(a, &l)| (a - f64::from(l)).powi(2)).sum::<f64>() / n;
    let base: f64 = y.iter().map(|&l| (prev - f64::from(l)).powi(2)).sum::<f64>() / n;
    Some(1.0 - brier / base)
}

fn naive_rank(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Every metric on one input against its brute-force definition.
pub fn metric_case(s: &[f64], y: &[u8], out: &mut OracleSummary) {
    out.compare(auroc(s, y).ok(), naive_auroc(s, y));
    out.compare(auprc(s, y).ok(), naive_auprc(s, y));
    out.compare(bss(s, y).ok(), naive_bss(s, y));
    for bins in [1, 3, 10] {
        out.compare(ace(s, y, bins).ok(), Some(naive_ace(s, y, bins)));
    }
    let yf: Vec<f64> = y.iter().map(|&l| f64::from(l)).collect();
    out.compare(spearman(s, &yf), naive_pearson(&naive_rank(s), &naive_rank(&yf)));
    out.compare(pearson(s, &yf), naive_pearson(s, &yf));
}

fn labels_of(mask: usize, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((mask >> i) & 1) as u8).collect()
}

/// All score vectors over [`METRIC_ALPHABET`] with n <= 5 under every
/// labeling, plus four score patterns for 6 <= n <= 12 under every labeling.
/// Returns the summary and the number of inputs.
pub fn metric_oracle_exhaustive() -> (OracleSummary, usize) {
    let mut out = OracleSummary::default();
    let mut cases = 0;
    let a = METRIC_ALPHABET.len();
    for n in 1..=5 {
        for code in 0..a.pow(n as u32) {
            let s: Vec<f64> = (0..n).map(|i| METRIC_ALPHABET[(code / a.pow(i as u32)) % a]).collect();
            for mask in 0..1usize << n {
                metric_case(&s, &labels_of(mask, n), &mut out);
                cases += 1;
            }
        }
    }
    for n in 6..=12 {
        let score_sets: Vec<Vec<f64>> = vec![
            (0..n).map(|i| i as f64 / n as f64).collect(),
            (0..n).map(|i| METRIC_ALPHABET[i % 4]).collect(),
            (0..n).map(|i| METRIC_ALPHABET[(i * 7 + 3) % 4] * 0.5 + 0.25 * (i % 2) as f64).collect(),
            vec![0.5; n],
        ];
        for s in &score_sets {
            for mask in 0..1usize << n {
                metric_case(s, &labels_of(mask, n), &mut out);
                cases += 1;
            }
        }
    }
    (out, cases)
}

/// Random inputs of size 2..60 with tied scores.
pub fn metric_oracle_random(cases: usize) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = OracleSummary::default();
    for _ in 0..cases {
        let n = rng.gen_range(2..60);
        let levels = rng.gen_range(2..30);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=levels) as f64 / levels as f64).collect();
        let rate: f64 = rng.gen_range(0.05..0.95);
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < rate)).collect();
        metric_case(&s, &y, &mut out);
    }
    out
}
