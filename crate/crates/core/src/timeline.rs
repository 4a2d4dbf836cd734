//! Chronological event timelines with a prediction slot after every event.
//!
//! A timeline of `n` events is read as the sequence
//! `e₀, P₀, e₁, P₁, …, e_{n−1}, P_{n−1}`: slot `P_j` sits at position `2j + 1`
//! and sees every event up to and including `e_j`.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::cohort::{ModalityRecord, StayLabels};
use crate::encoder::{EncoderBank, Source};
use crate::error::{CoreError, Result};

pub const MAX_EVENTS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    /// Index in the full chronological order of the stay, stable under
    /// truncation and ablation.
    pub id: usize,
    pub offset_minutes: f64,
    pub modality: usize,
    pub features: Vec<f64>,
    /// Replaced by the modality's missing token (fine-tuning modality dropout).
    pub masked: bool,
    /// Cached embedding from a frozen encoder bank.
    pub embedding: Option<Vec<f64>>,
}

impl Event {
    pub fn source(&self) -> Source {
        if self.masked {
            Source::Dropped
        } else {
            Source::Encoded
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventTimeline {
    pub stay_id: u64,
    pub events: Vec<Event>,
    pub labels: StayLabels,
}

impl EventTimeline {
    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn seq_len(&self) -> usize {
        2 * self.events.len()
    }

    /// Sequence positions of the prediction slots.
    pub fn predict_positions(&self) -> Vec<usize> {
        (0..self.events.len()).map(|j| 2 * j + 1).collect()
    }

    pub fn has_modality(&self, modality: usize) -> bool {
        self.events.iter().any(|e| e.modality == modality)
    }

    /// Distinct modalities in order of first appearance.
    pub fn modalities(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for e in &self.events {
            if !out.contains(&e.modality) {
                out.push(e.modality);
            }
        }
        out
    }

    /// Removes every event of `modality` together with its slot.
    pub fn ablate_modality(&self, modality: usize) -> Result<EventTimeline> {
        let events: Vec<Event> = self.events.iter().filter(|e| e.modality != modality).cloned().collect();
        if events.is_empty() {
            return Err(CoreError::data(format!(
                "removing modality {modality} leaves stay {} without events",
                self.stay_id
            )));
        }
        Ok(EventTimeline { events, ..self.clone() })
    }

    /// Masks each distinct modality with probability `p`: its events are
    /// replaced by the missing token.
    pub fn with_modality_dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> EventTimeline {
        let mut out = self.clone();
        if p <= 0.0 {
            return out;
        }
        for m in self.modalities() {
            if rng.gen::<f64>() < p {
                out.events.iter_mut().filter(|e| e.modality == m).for_each(|e| e.masked = true);
            }
        }
        out
    }
}

/// Builds a stay's timeline from its records. Events are ordered by
/// (offset, modality index, record position); only the latest
/// [`MAX_EVENTS`] are kept.
pub fn assemble(records: &[&ModalityRecord], labels: &StayLabels) -> Result<EventTimeline> {
    let Some(first) = records.first() else {
        return Err(CoreError::data("cannot assemble a timeline from zero records"));
    };
    let stay_id = first.stay_id;
    if records.iter().any(|r| r.stay_id != stay_id) {
        return Err(CoreError::data("records of several stays passed to one timeline"));
    }
    let mut present: Vec<(usize, &ModalityRecord)> =
        records.iter().enumerate().filter(|(_, r)| !r.is_absent()).map(|(i, r)| (i, *r)).collect();
    if present.is_empty() {
        return Err(CoreError::data(format!("stay {stay_id} has no events")));
    }
    present.sort_by(|(ia, a), (ib, b)| {
        a.offset_minutes
            .total_cmp(&b.offset_minutes)
            .then(a.modality.cmp(&b.modality))
            .then(ia.cmp(ib))
    });
    let skip = present.len().saturating_sub(MAX_EVENTS);
    let events = present
        .into_iter()
        .enumerate()
        .skip(skip)
        .map(|(id, (_, r))| Event {
            id,
            offset_minutes: r.offset_minutes,
            modality: r.modality,
            features: r.features.clone().expect("absent records filtered"),
            masked: false,
            embedding: None,
        })
        .collect();
    Ok(EventTimeline { stay_id, events, labels: labels.clone() })
}

/// Assembles timelines for the given stays of a cohort.
pub fn assemble_all(cohort: &crate::cohort::Cohort, stays: &[u64]) -> Result<Vec<EventTimeline>> {
    let by_stay = cohort.records_by_stay();
    stays
        .iter()
        .map(|id| {
            let recs = by_stay.get(id).ok_or_else(|| CoreError::data(format!("stay {id} has no records")))?;
            let labels = cohort
                .labels
                .get(id)
                .ok_or_else(|| CoreError::data(format!("stay {id} has no labels")))?;
            assemble(recs, labels)
        })
        .collect()
}

/// Caches frozen-encoder embeddings on every event.
pub fn attach_embeddings(bank: &EncoderBank, timelines: &mut [EventTimeline]) -> Result<()> {
    for m in 0..bank.n_modalities() {
        let mut slots = Vec::new();
        for (t, tl) in timelines.iter().enumerate() {
            for (e, ev) in tl.events.iter().enumerate() {
                if ev.modality == m {
                    slots.push((t, e));
                }
            }
        }
        for chunk in slots.chunks(512) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&(t, e)| timelines[t].events[e].features.as_slice()).collect();
            let z = bank.encode_eval(m, &rows)?;
            for (&(t, e), v) in chunk.iter().zip(z) {
                timelines[t].events[e].embedding = Some(v);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ExportEvent<'a> {
    offset: f64,
    modality: &'a str,
    source: &'static str,
}

#[derive(Serialize)]
struct ExportTimeline<'a> {
    stay_id: u64,
    events: Vec<ExportEvent<'a>>,
}

/// One JSON object per stay with its ordered `(offset, modality, source)` events.
pub fn write_timelines_jsonl<W: Write>(timelines: &[EventTimeline], names: &[String], mut w: W) -> Result<()> {
    for t in timelines {
        let line = ExportTimeline {
            stay_id: t.stay_id,
            events: t
                .events
                .iter()
                .map(|e| ExportEvent { offset: e.offset_minutes, modality: &names[e.modality], source: e.source().as_str() })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
