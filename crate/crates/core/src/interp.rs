//! Attention traces and modality-ablation analysis of a trained decoder.
//!
//! A trace holds the head-averaged final-layer attention of one stay with a
//! per-position annotation and the prediction trajectory. Ablation reruns
//! the stay with one modality removed and compares trajectories (aligned by
//! event identity) and the attention mass each position category receives
//! from the prediction slots.

use std::io::Write;

use serde::Serialize;

use crate::decoder::{forward_with_attention, Decoder, Task, Trajectory};
use crate::encoder::EncoderBank;
use crate::error::{CoreError, Result};
use crate::timeline::EventTimeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Event,
    Predict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PositionTag {
    pub position: usize,
    pub kind: PositionKind,
    pub modality: usize,
    pub event_id: usize,
    pub offset_minutes: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub stay_id: u64,
    pub annotation: Vec<PositionTag>,
    /// `T × T` head-averaged final-layer attention.
    pub heatmap: Vec<Vec<f64>>,
    pub trajectory: Trajectory,
}

/// Attention mass received per position category, averaged over slot rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMass {
    pub per_modality: Vec<f64>,
    pub predict: f64,
}

impl AttentionMass {
    pub fn total(&self) -> f64 {
        self.per_modality.iter().sum::<f64>() + self.predict
    }
}

/// Arithmetic mean over heads of `[heads, T, T]` weights.
pub fn head_average(weights: &mga_nn::Tensor) -> Vec<Vec<f64>> {
    let s = weights.shape();
    let (h, t) = (s[0], s[1]);
    let d = weights.data();
    (0..t)
        .map(|i| {
            (0..t)
                .map(|j| (0..h).map(|k| d[(k * t + i) * t + j]).sum::<f64>() / h as f64)
                .collect()
        })
        .collect()
}

pub fn extract_trace(decoder: &Decoder, bank: &EncoderBank, timeline: &EventTimeline) -> Result<AttentionTrace> {
    let (trajectory, weights) = forward_with_attention(decoder, bank, timeline)?;
    let mut annotation = Vec::with_capacity(timeline.seq_len());
    for (j, e) in timeline.events.iter().enumerate() {
        for (k, kind) in [PositionKind::Event, PositionKind::Predict].into_iter().enumerate() {
            annotation.push(PositionTag {
                position: 2 * j + k,
                kind,
                modality: e.modality,
                event_id: e.id,
                offset_minutes: e.offset_minutes,
            });
        }
    }
    Ok(AttentionTrace {
        stay_id: timeline.stay_id,
        annotation,
        heatmap: head_average(&weights),
        trajectory,
    })
}

/// For each modality, the attention its event positions receive from the
/// prediction-slot rows, averaged over those rows; `predict` collects the
/// mass landing on slot positions. Each row sums to 1, so the categories
/// partition the mass.
pub fn modality_attention_mass(trace: &AttentionTrace, n_modalities: usize) -> AttentionMass {
    let mut per_modality = vec![0.0; n_modalities];
    let mut predict = 0.0;
    let rows: Vec<usize> = trace
        .annotation
        .iter()
        .filter(|a| a.kind == PositionKind::Predict)
        .map(|a| a.position)
        .collect();
    for &r in &rows {
        for (j, tag) in trace.annotation.iter().enumerate().take(r + 1) {
            let w = trace.heatmap[r][j];
            match tag.kind {
                PositionKind::Event => per_modality[tag.modality] += w,
                PositionKind::Predict => predict += w,
            }
        }
    }
    let n = rows.len().max(1) as f64;
    per_modality.iter_mut().for_each(|m| *m /= n);
    AttentionMass { per_modality, predict: predict / n }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub removed_modality: usize,
    pub baseline: AttentionTrace,
    pub ablated: AttentionTrace,
    /// Mean absolute prediction difference over slots surviving the ablation.
    pub trajectory_divergence: f64,
    /// Whether the final hard prediction (threshold 0.5) changes.
    pub flip: bool,
    /// Ablated minus baseline attention mass per modality.
    pub attention_shift: Vec<f64>,
    pub predict_shift: f64,
}

fn divergence(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (j, id) in b.event_ids.iter().enumerate() {
        if let Some(i) = a.event_ids.iter().position(|x| x == id) {
            for (x, y) in a.outputs[i].iter().zip(&b.outputs[j]) {
                sum += (x - y).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn flipped(task: Task, a: &Trajectory, b: &Trajectory) -> bool {
    task.is_classification()
        && a.final_output()
            .iter()
            .zip(b.final_output())
            .any(|(x, y)| (*x >= 0.5) != (*y >= 0.5))
}

/// Compares a stay's trace with and without `modality`. Removing a modality
/// the stay does not have is an exact no-op.
pub fn compare_ablation(
    decoder: &Decoder,
    bank: &EncoderBank,
    timeline: &EventTimeline,
    modality: usize,
) -> Result<AblationReport> {
    let n_mod = bank.n_modalities();
    if modality >= n_mod {
        return Err(CoreError::data(format!("modality {modality} outside the bank")));
    }
    let baseline = extract_trace(decoder, bank, timeline)?;
    let ablated = if timeline.has_modality(modality) {
        extract_trace(decoder, bank, &timeline.ablate_modality(modality)?)?
    } else {
        baseline.clone()
    };
    let mb = modality_attention_mass(&baseline, n_mod);
    let ma = modality_attention_mass(&ablated, n_mod);
    Ok(AblationReport {
        removed_modality: modality,
        trajectory_divergence: divergence(&baseline.trajectory, &ablated.trajectory),
        flip: flipped(decoder.task(), &baseline.trajectory, &ablated.trajectory),
        attention_shift: ma.per_modality.iter().zip(&mb.per_modality).map(|(a, b)| a - b).collect(),
        predict_shift: ma.predict - mb.predict,
        baseline,
        ablated,
    })
}

/// Increase of attention mass on `sink` after the ablation.
pub fn sink_score(report: &AblationReport, sink: usize) -> Result<f64> {
    let present = |t: &AttentionTrace| t.annotation.iter().any(|a| a.kind == PositionKind::Event && a.modality == sink);
    if !present(&report.baseline) || !present(&report.ablated) {
        return Err(CoreError::data(format!("sink modality {sink} is not present in both traces")));
    }
    Ok(report.attention_shift[sink])
}

/// Heatmap as a CSV matrix (no header).
pub fn write_heatmap_csv<W: Write>(trace: &AttentionTrace, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in &trace.heatmap {
        wr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    stay_id: u64,
    positions: Vec<SidecarTag<'a>>,
}

#[derive(Serialize)]
struct SidecarTag<'a> {
    position: usize,
    kind: PositionKind,
    modality: &'a str,
    event_id: usize,
    offset_minutes: f64,
}

/// Position annotations of a heatmap as JSON.
pub fn write_annotation_json<W: Write>(trace: &AttentionTrace, names: &[String], w: W) -> Result<()> {
    let sidecar = Sidecar {
        stay_id: trace.stay_id,
        positions: trace
            .annotation
            .iter()
            .map(|a| SidecarTag {
                position: a.position,
                kind: a.kind,
                modality: &names[a.modality],
                event_id: a.event_id,
                offset_minutes: a.offset_minutes,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(w, &sidecar)?;
    Ok(())
}

/// Trajectory pair CSV `slot,offset,baseline_pred,ablated_pred` over the
/// baseline slots; removed slots leave `ablated_pred` empty. Multi-output
/// tasks add a `class_id` column.
pub fn write_trajectory_pair_csv<W: Write>(report: &AblationReport, w: W) -> Result<()> {
    let (a, b) = (&report.baseline.trajectory, &report.ablated.trajectory);
    let multi = a.outputs.first().map_or(1, Vec::len) > 1;
    let mut wr = csv::Writer::from_writer(w);
    if multi {
        wr.write_record(["slot", "offset", "baseline_pred", "ablated_pred", "class_id"])?;
    } else {
        wr.write_record(["slot", "offset", "baseline_pred", "ablated_pred"])?;
    }
    for (j, id) in a.event_ids.iter().enumerate() {
        let other = b.event_ids.iter().position(|x| x == id);
        for (c, v) in a.outputs[j].iter().enumerate() {
            let ab = other.map_or_else(String::new, |k| b.outputs[k][c].to_string());
            let mut row = vec![j.to_string(), a.offsets[j].to_string(), v.to_string(), ab];
            if multi {
                row.push(c.to_string());
            }
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}
