use std::collections::BTreeMap;

use mga_core::cohort::{self, generate, generate_with_latents, mimic_like, Cohort, GeneratorConfig, ModalitySpec};
use mga_core::metrics::auroc;
use mga_core::split::{allocate, split_report, stratify, Split};
use proptest::prelude::*;

fn stays_with_n_modalities(c: &Cohort) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for mask in c.presence_masks().values() {
        *out.entry(mask.count_ones()).or_insert(0) += 1;
    }
    out
}

#[test]
fn presence_rates_match_configuration() {
    for cfg in [cohort::mimic_like(8000, 1), cohort::eicu_like(8000, 2), cohort::sink_engineered(8000, 3)] {
        let c = generate(&cfg).unwrap();
        let masks = c.presence_masks();
        assert!(masks.len() >= 10_000, "{} stays", masks.len());
        for (i, m) in cfg.modalities.iter().enumerate() {
            let rate = masks.values().filter(|&&k| k & (1 << i) != 0).count() as f64 / masks.len() as f64;
            assert!((rate - m.presence).abs() <= 0.02, "{}: {rate} vs {}", m.name, m.presence);
        }
        assert!(masks.values().all(|&k| k != 0));
    }
}

#[test]
fn presets_reproduce_their_missingness_regimes() {
    let mimic = generate(&cohort::mimic_like(3000, 4)).unwrap();
    let counts = stays_with_n_modalities(&mimic);
    let total: usize = counts.values().sum();
    assert!(counts[&1] as f64 / total as f64 > 0.5, "single-modality share {counts:?}");

    let eicu = generate(&cohort::eicu_like(3000, 4)).unwrap();
    let counts = stays_with_n_modalities(&eicu);
    let total: usize = counts.values().sum();
    assert!(counts[&6] as f64 / total as f64 > 0.5, "fully observed share {counts:?}");
}

/// AUROC of a least-squares probe from the latent state to mortality.
fn latent_probe_auroc(cfg: &cohort::GeneratorConfig) -> f64 {
    let (c, latents) = generate_with_latents(cfg).unwrap();
    let ids: Vec<u64> = c.stay_ids();
    let d = cfg.latent_dim;
    let mut xtx = vec![vec![0.0; d + 1]; d + 1];
    let mut xty = vec![0.0; d + 1];
    for id in &ids {
        let mut x = latents.by_stay[id].clone();
        x.push(1.0);
        let y = f64::from(c.labels[id].mortality);
        for a in 0..=d {
            xty[a] += x[a] * y;
            for b in 0..=d {
                xtx[a][b] += x[a] * x[b];
            }
        }
    }
    // Gaussian elimination.
    let n = d + 1;
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| xtx[a][col].abs().total_cmp(&xtx[b][col].abs())).unwrap();
        xtx.swap(col, piv);
        xty.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = xtx[r][col] / xtx[col][col];
                for k in 0..n {
                    xtx[r][k] -= f * xtx[col][k];
                }
                xty[r] -= f * xty[col];
            }
        }
    }
    let w: Vec<f64> = (0..n).map(|i| xty[i] / xtx[i][i]).collect();
    let scores: Vec<f64> = ids
        .iter()
        .map(|id| latents.by_stay[id].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let labels: Vec<u8> = ids.iter().map(|id| c.labels[id].mortality).collect();
    auroc(&scores, &labels).unwrap()
}

#[test]
fn labels_are_recoverable_from_the_latent_state() {
    let mut cfg = mimic_like(4000, 9);
    let noisy = latent_probe_auroc(&cfg);
    assert!((0.75..0.92).contains(&noisy), "probe AUROC {noisy} at label noise {}", cfg.label_model.label_noise);
    cfg.label_model.label_noise = 0.2;
    let clean = latent_probe_auroc(&cfg);
    assert!(clean > 0.95, "probe AUROC {clean}");
}

#[test]
fn one_patient_with_three_stays_shares_a_split() {
    let mut cfg = mimic_like(40, 5);
    cfg.stays_per_patient = [3, 3];
    cfg.orphan_fraction = 0.0;
    let c = generate(&cfg).unwrap();
    let s = stratify(&c, 1).unwrap();
    let patients = c.patients();
    let mut seen: BTreeMap<u64, Split> = BTreeMap::new();
    for (stay, split) in &s.assignment {
        let p = patients[stay].unwrap();
        assert_eq!(*seen.entry(p).or_insert(*split), *split);
    }
}

#[test]
fn hundred_orphans_in_one_stratum_split_70_15_15() {
    let mut cfg = mimic_like(100, 6);
    cfg.orphan_fraction = 1.0;
    for m in &mut cfg.modalities {
        m.presence = 1.0;
    }
    let c = generate(&cfg).unwrap();
    let s = stratify(&c, 3).unwrap();
    let report = split_report(&s);
    let sizes: Vec<usize> = report.iter().map(|r| r.n_stays).collect();
    assert_eq!(sizes, vec![70, 15, 15]);
    assert!(report.iter().all(|r| r.missing.iter().all(|&m| m == 0)));
    assert_eq!(stratify(&c, 3).unwrap(), s);
}

#[test]
fn split_presence_rates_agree_on_large_cohorts() {
    let c = generate(&mimic_like(5000, 12)).unwrap();
    let s = stratify(&c, 8).unwrap();
    let report = split_report(&s);
    let total: usize = report.iter().map(|r| r.n_stays).sum();
    assert_eq!(total, c.labels.len());
    for r in &report {
        assert_eq!(r.patient_stays + r.orphan_stays, r.n_stays);
        for m in 0..c.n_modalities() {
            assert_eq!(r.present[m] + r.missing[m], r.n_stays);
        }
    }
    for m in 0..c.n_modalities() {
        let diff = (report[0].presence_rate(m) - report[2].presence_rate(m)).abs();
        assert!(diff < 0.03, "modality {m}: {diff}");
    }
}

#[test]
fn tiny_strata_go_to_train() {
    let mods = vec![ModalitySpec::new("a", 2, false, 1.0), ModalitySpec::new("b", 2, false, 0.01)];
    let cfg = GeneratorConfig { modalities: mods, orphan_fraction: 1.0, ..mimic_like(50, 2) };
    let c = generate(&cfg).unwrap();
    let s = stratify(&c, 0).unwrap();
    let masks = c.presence_masks();
    let rare: Vec<u64> = masks.iter().filter(|(_, &m)| m == 0b11).map(|(&k, _)| k).collect();
    if rare.len() < 3 {
        assert!(rare.iter().all(|k| s.assignment[k] == Split::Train));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_invariants_hold(n in 20usize..300, seed in any::<u64>(), split_seed in any::<u64>()) {
        let c = generate(&mimic_like(n, seed)).unwrap();
        let s = stratify(&c, split_seed).unwrap();
        // Union equals the stay set and each stay is assigned once.
        prop_assert!(s.assignment.keys().eq(c.labels.keys()));
        // No patient spans two splits.
        let mut seen: BTreeMap<u64, Split> = BTreeMap::new();
        for (stay, pid) in c.patients() {
            if let Some(p) = pid {
                prop_assert_eq!(*seen.entry(p).or_insert(s.assignment[&stay]), s.assignment[&stay]);
            }
        }
        // Strata of at least 20 units honor their allocation exactly.
        let mut units: BTreeMap<(bool, u32), BTreeMap<Split, std::collections::BTreeSet<u64>>> = BTreeMap::new();
        let patients = c.patients();
        for (stay, split) in &s.assignment {
            let key = (patients[stay].is_none(), s.strata[stay]);
            let unit = patients[stay].map_or(*stay, |p| p + 1_000_000_000);
            units.entry(key).or_default().entry(*split).or_default().insert(unit);
        }
        for per_split in units.values() {
            let counts: Vec<usize> = Split::ALL.iter().map(|sp| per_split.get(sp).map_or(0, |u| u.len())).collect();
            let n_units: usize = counts.iter().sum();
            if n_units >= 20 {
                prop_assert_eq!(counts, allocate(n_units).to_vec());
            }
        }
    }
}
