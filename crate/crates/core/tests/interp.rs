use mga_core::decoder::Task;
use mga_core::interp::{
    compare_ablation, extract_trace, modality_attention_mass, sink_score, write_annotation_json, write_heatmap_csv,
    write_trajectory_pair_csv, PositionKind,
};
use mga_core::timeline::EventTimeline;
use proptest::prelude::*;
use rand::Rng;

mod common;
use common::{random_timeline, rng, small_bank, small_decoder};

/// Stay with every modality: demographics plus `n` labs/notes events.
fn full_stay(seed: u64, n: usize) -> EventTimeline {
    let mut r = rng(seed);
    loop {
        let t = random_timeline(&mut r, seed, n, true);
        if t.has_modality(1) && t.has_modality(2) {
            return t;
        }
    }
}

#[test]
fn attention_mass_partitions_each_slot_row() {
    for seed in 0..30u64 {
        let bank = small_bank(seed);
        let decoder = small_decoder(Task::ALL[seed as usize % 3], seed);
        let t = full_stay(seed, 2 + seed as usize % 8);
        let trace = extract_trace(&decoder, &bank, &t).unwrap();
        assert_eq!(trace.heatmap.len(), t.seq_len());
        assert_eq!(trace.annotation.len(), t.seq_len());
        let mass = modality_attention_mass(&trace, 3);
        assert!((mass.total() - 1.0).abs() < 1e-9, "{mass:?}");
        assert!(mass.per_modality.iter().all(|&m| (0.0..=1.0).contains(&m)));
    }
}

#[test]
fn single_modality_stay_splits_mass_between_modality_and_slots() {
    let bank = small_bank(1);
    let decoder = small_decoder(Task::Mortality, 1);
    let mut r = rng(1);
    let mut t = random_timeline(&mut r, 4, 6, false);
    t.events.iter_mut().for_each(|e| {
        e.modality = 1;
        e.features.truncate(4);
        e.features.resize(4, 0.5);
    });
    let mass = modality_attention_mass(&extract_trace(&decoder, &bank, &t).unwrap(), 3);
    assert_eq!(mass.per_modality[0], 0.0);
    assert_eq!(mass.per_modality[2], 0.0);
    assert!((mass.per_modality[1] + mass.predict - 1.0).abs() < 1e-9);
}

#[test]
fn annotations_pair_each_event_with_its_slot() {
    let bank = small_bank(2);
    let decoder = small_decoder(Task::Mortality, 2);
    let t = full_stay(2, 5);
    let trace = extract_trace(&decoder, &bank, &t).unwrap();
    for (j, e) in t.events.iter().enumerate() {
        let (ev, slot) = (&trace.annotation[2 * j], &trace.annotation[2 * j + 1]);
        assert_eq!((ev.kind, slot.kind), (PositionKind::Event, PositionKind::Predict));
        assert_eq!((ev.position, slot.position), (2 * j, 2 * j + 1));
        assert_eq!((ev.event_id, slot.event_id), (e.id, e.id));
        assert_eq!(ev.modality, e.modality);
    }
}

#[test]
fn removing_an_absent_modality_changes_nothing() {
    let bank = small_bank(3);
    let decoder = small_decoder(Task::Mortality, 3);
    let mut r = rng(3);
    let t = random_timeline(&mut r, 5, 6, false);
    let report = compare_ablation(&decoder, &bank, &t, 0).unwrap();
    assert_eq!(report.baseline, report.ablated);
    assert_eq!(report.trajectory_divergence, 0.0);
    assert!(!report.flip);
    assert!(report.attention_shift.iter().all(|&s| s == 0.0));
    assert_eq!(report.predict_shift, 0.0);
    assert!(compare_ablation(&decoder, &bank, &t, 3).is_err());
}

#[test]
fn constant_head_never_diverges() {
    let bank = small_bank(4);
    let mut decoder = small_decoder(Task::Phenotyping, 4);
    let w = decoder.store.find("head.w").unwrap();
    decoder.store.value_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
    for seed in 0..10 {
        let t = full_stay(seed, 6);
        let report = compare_ablation(&decoder, &bank, &t, 2).unwrap();
        assert_eq!(report.trajectory_divergence, 0.0);
        assert!(!report.flip);
    }
}

#[test]
fn reruns_are_identical() {
    let bank = small_bank(5);
    let decoder = small_decoder(Task::Mortality, 5);
    let t = full_stay(5, 7);
    let a = compare_ablation(&decoder, &bank, &t, 1).unwrap();
    let b = compare_ablation(&decoder, &bank, &t, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.trajectory_divergence > 0.0);
    assert_eq!(a.ablated.trajectory.event_ids.len(), t.events.iter().filter(|e| e.modality != 1).count());
}

#[test]
fn sink_score_needs_the_sink_in_both_traces() {
    let bank = small_bank(6);
    let decoder = small_decoder(Task::Mortality, 6);
    let t = full_stay(6, 5);
    let report = compare_ablation(&decoder, &bank, &t, 1).unwrap();
    assert_eq!(sink_score(&report, 0).unwrap(), report.attention_shift[0]);
    assert!(sink_score(&report, 1).is_err());
    let same = compare_ablation(&decoder, &bank, &t, 1).unwrap();
    let identical = mga_core::interp::AblationReport {
        ablated: same.baseline.clone(),
        attention_shift: vec![0.0; 3],
        ..same
    };
    assert_eq!(sink_score(&identical, 0).unwrap(), 0.0);
}

#[test]
fn exports_are_parseable() {
    let bank = small_bank(7);
    let decoder = small_decoder(Task::Phenotyping, 7);
    let t = full_stay(7, 4);
    let report = compare_ablation(&decoder, &bank, &t, 2).unwrap();
    let names: Vec<String> = ["demographics", "labs", "notes"].map(String::from).to_vec();

    let mut heat = Vec::new();
    write_heatmap_csv(&report.baseline, &mut heat).unwrap();
    let rows: Vec<Vec<f64>> = String::from_utf8(heat)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows, report.baseline.heatmap);

    let mut json = Vec::new();
    write_annotation_json(&report.baseline, &names, &mut json).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v["stay_id"], t.stay_id);
    assert_eq!(v["positions"].as_array().unwrap().len(), t.seq_len());
    assert_eq!(v["positions"][1]["kind"], "predict");
    assert_eq!(v["positions"][0]["modality"], "demographics");

    let mut pair = Vec::new();
    write_trajectory_pair_csv(&report, &mut pair).unwrap();
    let text = String::from_utf8(pair).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("slot,offset,baseline_pred,ablated_pred,class_id"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), t.n_events() * 25);
    let removed = t.events.iter().filter(|e| e.modality == 2).count() * 25;
    assert_eq!(body.iter().filter(|l| l.split(',').nth(3) == Some("")).count(), removed);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shifts_are_bounded(seed in any::<u64>(), n in 2usize..10) {
        let bank = small_bank(seed % 7);
        let decoder = small_decoder(Task::Mortality, seed % 11);
        let t = full_stay(seed, n);
        let m = rng(seed).gen_range(1..3);
        let report = compare_ablation(&decoder, &bank, &t, m).unwrap();
        for s in &report.attention_shift {
            prop_assert!((-1.0..=1.0).contains(s));
        }
        let s = sink_score(&report, 0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let total: f64 = report.attention_shift.iter().sum::<f64>() + report.predict_shift;
        prop_assert!(total.abs() < 1e-9);
    }
}
