//! Helpers shared by the integration tests.

#![allow(dead_code)]

pub mod checks;

use mga_core::cohort::{ModalitySpec, StayLabels, N_PHENOTYPES};
use mga_core::decoder::{Decoder, DecoderConfig, Task};
use mga_core::encoder::{EncoderBank, EncoderConfig};
use mga_core::timeline::{Event, EventTimeline};
use mga_nn::{grad_check_fn, GradCheckReport, ParamId, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn trainable(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.is_trainable(id)).collect()
}

/// Finite-difference check of the gradients already accumulated in `store`.
///
/// `eval` receives a copy of `store` with one coordinate perturbed and
/// returns the objective.
pub fn check_accumulated<F>(store: &ParamStore, h: f64, mut eval: F) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let ids = trainable(store);
    let x: Vec<f64> = ids.iter().flat_map(|&id| store.value(id).data().to_vec()).collect();
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| store.get(id).grad.data().to_vec()).collect();
    grad_check_fn(
        |flat| {
            let mut s = store.clone();
            let mut at = 0;
            for &id in &ids {
                let n = s.value(id).len();
                s.value_mut(id).data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
            eval(&s)
        },
        &analytic,
        &x,
        h,
    )
    .expect("finite objective")
}

/// Name of the parameter holding flat coordinate `idx`.
pub fn coordinate_name(store: &ParamStore, idx: usize) -> String {
    let mut at = 0;
    for id in trainable(store) {
        let n = store.value(id).len();
        if idx < at + n {
            return format!("{}[{}]", store.get(id).name, idx - at);
        }
        at += n;
    }
    format!("#{idx}")
}

pub const LATENT: usize = 4;

pub fn modalities() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::new("demographics", 3, true, 1.0),
        ModalitySpec::new("labs", 4, false, 1.0),
        ModalitySpec::new("notes", 5, false, 1.0),
    ]
}

pub fn small_bank(seed: u64) -> EncoderBank {
    let cfg = EncoderConfig { latent_dim: LATENT, hidden: 6, dropout: 0.1, token_std: 0.3, init_tau: 0.3 };
    EncoderBank::new(&modalities(), &cfg, seed).unwrap()
}

pub fn small_decoder(task: Task, seed: u64) -> Decoder {
    let cfg = DecoderConfig { d_model: 8, layers: 2, heads: 2, ffn_mult: 2, dropout: 0.1, task };
    Decoder::new(LATENT, &cfg, seed).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng) -> StayLabels {
    StayLabels {
        mortality: u8::from(rng.gen::<bool>()),
        phenotypes: (0..N_PHENOTYPES).map(|_| u8::from(rng.gen::<f64>() < 0.3)).collect(),
        los_hours: rng.gen_range(12.0..720.0),
    }
}

/// Random timeline over [`modalities`]: demographics at offset 0 when
/// `with_static`, then `n` time-varying events at increasing offsets.
pub fn random_timeline(rng: &mut ChaCha8Rng, stay_id: u64, n: usize, with_static: bool) -> EventTimeline {
    let specs = modalities();
    let mut events = Vec::new();
    let mut push = |modality: usize, offset: f64, rng: &mut ChaCha8Rng| {
        let id = events.len();
        events.push(Event {
            id,
            offset_minutes: offset,
            modality,
            features: (0..specs[modality].dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect(),
            masked: false,
            embedding: None,
        });
    };
    if with_static {
        push(0, 0.0, rng);
    }
    let mut t = 0.0;
    for _ in 0..n {
        t += rng.gen_range(1.0..600.0);
        let m = rng.gen_range(1..3);
        push(m, t, rng);
    }
    EventTimeline { stay_id, events, labels: random_labels(rng) }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
