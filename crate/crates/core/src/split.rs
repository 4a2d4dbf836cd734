//! Missingness-aware stratified train/val/test splitting.
//!
//! Identified patients are the unit of assignment, so every stay of a patient
//! lands in the same split; each patient is stratified by the modality
//! combination of their first stay. Stays without a patient id are stratified
//! on their own combination, separately from patients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::Cohort;
use crate::error::{CoreError, Result};

pub const FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSplit {
    pub assignment: BTreeMap<u64, Split>,
    /// Modality-combination bitmask of the stratum each stay was assigned through.
    pub strata: BTreeMap<u64, u32>,
    /// Each stay's own modality-combination bitmask.
    pub masks: BTreeMap<u64, u32>,
    pub orphans: BTreeSet<u64>,
    pub n_modalities: usize,
}

impl CohortSplit {
    pub fn stays(&self, split: Split) -> Vec<u64> {
        self.assignment.iter().filter(|(_, &s)| s == split).map(|(&id, _)| id).collect()
    }
}

/// Largest-remainder allocation of `n` units over the target fractions.
/// Equal remainders favour train, then val, then test.
pub fn allocate(n: usize) -> [usize; 3] {
    let exact: Vec<f64> = FRACTIONS.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Assigns every stay to train/val/test. Deterministic under `seed`.
pub fn stratify(cohort: &Cohort, seed: u64) -> Result<CohortSplit> {
    if cohort.records.is_empty() {
        return Err(CoreError::data("cannot split an empty cohort"));
    }
    let masks = cohort.presence_masks();
    let patients = cohort.patients();

    let mut by_patient: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let mut orphans = BTreeSet::new();
    for (&stay, &pid) in &patients {
        match pid {
            Some(p) => by_patient.entry(p).or_default().push(stay),
            None => {
                orphans.insert(stay);
            }
        }
    }

    // Units keyed by (is_orphan, stratum mask); each unit is a list of stays.
    let mut strata: BTreeMap<(bool, u32), Vec<Vec<u64>>> = BTreeMap::new();
    for stays in by_patient.values() {
        let first = *stays.iter().min().expect("patient has a stay");
        strata.entry((false, masks[&first])).or_default().push(stays.clone());
    }
    for &stay in &orphans {
        strata.entry((true, masks[&stay])).or_default().push(vec![stay]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut stratum_of = BTreeMap::new();
    for ((orphan, mask), mut units) in strata {
        units.shuffle(&mut rng);
        let counts = if units.len() < 3 {
            log::warn!(
                "stratum {mask:#b} ({}) has {} member(s); assigning it to train",
                if orphan { "orphan stays" } else { "patients" },
                units.len()
            );
            [units.len(), 0, 0]
        } else {
            allocate(units.len())
        };
        let mut it = units.into_iter();
        for (split, &c) in Split::ALL.iter().zip(&counts) {
            for unit in it.by_ref().take(c) {
                for stay in unit {
                    assignment.insert(stay, *split);
                    stratum_of.insert(stay, mask);
                }
            }
        }
    }

    let out = CohortSplit {
        assignment,
        strata: stratum_of,
        masks,
        orphans,
        n_modalities: cohort.n_modalities(),
    };
    check_no_leakage(&out, &patients)?;
    Ok(out)
}

fn check_no_leakage(split: &CohortSplit, patients: &BTreeMap<u64, Option<u64>>) -> Result<()> {
    let mut seen: BTreeMap<u64, Split> = BTreeMap::new();
    for (stay, &pid) in patients {
        let s = split.assignment[stay];
        if let Some(p) = pid {
            if *seen.entry(p).or_insert(s) != s {
                return Err(CoreError::data(format!("patient {p} appears in two splits")));
            }
        }
    }
    Ok(())
}

/// Per-split summary of modality presence and patient/orphan composition.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub split: Split,
    pub n_stays: usize,
    pub patient_stays: usize,
    pub orphan_stays: usize,
    pub present: Vec<usize>,
    pub missing: Vec<usize>,
}

impl SplitSummary {
    pub fn presence_rate(&self, modality: usize) -> f64 {
        self.present[modality] as f64 / self.n_stays.max(1) as f64
    }
}

pub fn split_report(split: &CohortSplit) -> Vec<SplitSummary> {
    Split::ALL
        .iter()
        .map(|&s| {
            let mut row = SplitSummary {
                split: s,
                n_stays: 0,
                patient_stays: 0,
                orphan_stays: 0,
                present: vec![0; split.n_modalities],
                missing: vec![0; split.n_modalities],
            };
            for (stay, _) in split.assignment.iter().filter(|(_, &a)| a == s) {
                row.n_stays += 1;
                if split.orphans.contains(stay) {
                    row.orphan_stays += 1;
                } else {
                    row.patient_stays += 1;
                }
                let mask = split.masks[stay];
                for m in 0..split.n_modalities {
                    if mask & (1 << m) != 0 {
                        row.present[m] += 1;
                    } else {
                        row.missing[m] += 1;
                    }
                }
            }
            row
        })
        .collect()
}

pub fn write_split_csv<W: Write>(split: &CohortSplit, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["stay_id", "split", "stratum_bitmask"])?;
    for (stay, s) in &split.assignment {
        wr.write_record([stay.to_string(), s.to_string(), split.strata[stay].to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a split CSV; masks and orphan flags are recovered from the cohort.
pub fn read_split_csv<R: std::io::Read>(r: R, cohort: &Cohort) -> Result<CohortSplit> {
    let mut rd = csv::Reader::from_reader(r);
    let mut assignment = BTreeMap::new();
    let mut strata = BTreeMap::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != 3 {
            return Err(CoreError::data(format!("split row has {} fields", row.len())));
        }
        let stay: u64 = row[0].parse().map_err(|e| CoreError::data(format!("bad stay id: {e}")))?;
        assignment.insert(stay, row[1].parse()?);
        strata.insert(stay, row[2].parse().map_err(|e| CoreError::data(format!("bad stratum: {e}")))?);
    }
    let masks = cohort.presence_masks();
    if masks.keys().ne(assignment.keys()) {
        return Err(CoreError::data("split does not cover exactly the cohort's stays"));
    }
    let orphans = cohort
        .patients()
        .into_iter()
        .filter(|(_, p)| p.is_none())
        .map(|(s, _)| s)
        .collect();
    Ok(CohortSplit {
        assignment,
        strata,
        masks,
        orphans,
        n_modalities: cohort.n_modalities(),
    })
}

pub fn write_report_csv<W: Write>(split: &CohortSplit, names: &[String], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["split", "modality", "present", "missing"])?;
    let report = split_report(split);
    for row in &report {
        for (m, name) in names.iter().enumerate() {
            wr.write_record([row.split.as_str(), name, &row.present[m].to_string(), &row.missing[m].to_string()])?;
        }
    }
    wr.write_record(["split", "stays", "patient_stays", "orphan_stays"])?;
    for row in &report {
        wr.write_record([
            row.split.to_string(),
            row.n_stays.to_string(),
            row.patient_stays.to_string(),
            row.orphan_stays.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
