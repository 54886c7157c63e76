//! Synthetic datasets with known ground truth.
//!
//! The generator plants a latent vector per treatment and emits a full
//! dataset directory (events, demographics, catalog, configs, KEGG flat
//! files) whose pipeline reconstruction recovers the planted structure:
//!
//! * each patient gets one treatment block whose steroid-coverage target
//!   realizes `clip(base + β·(x - center) + γ·g(z) + ε, 0, 1)` rounded to
//!   a whole number of covered days, so the cohort module reconstructs it
//!   exactly;
//! * each treatment's KEGG flat file carries sign-hash tokens of its
//!   latent vector, so token-bag embeddings mirror latent geometry;
//! * `truth.json` records the planted effects and latent vectors for
//!   oracle tests.
//!
//! Everything is deterministic given the seed; patients draw from their
//! own derived streams, so generation parallelizes without changing
//! output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, PipelineConfig};
use crate::features::{FeatureKind, FeatureSpec, Window};
use crate::ingest::{
    self, Demographics, EventKind, EventRecord, Gender, IngestError, TreatmentCatalogEntry,
};
use crate::seed::{derive_seed, tag};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synth config: {0}")]
    BadConfig(String),
    #[error("infeasible synth config: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// How a latent vector maps to a treatment effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectLink {
    /// First latent coordinate; effects vary smoothly along one axis.
    Linear,
    /// Gaussian bump centred on the first axis pole, `exp(-|z - e1|^2)`;
    /// exercises model nonlinearity.
    Radial,
    /// `cos(pi * z[0])`: smooth, but with a correlation length of about
    /// 0.3 along the first axis. Neighbouring treatments share an effect
    /// while distant ones are uninformative about each other, which is
    /// the regime embedding-based transfer is supposed to exploit.
    Wave,
}

impl EffectLink {
    pub fn apply(self, z: &[f64]) -> f64 {
        match self {
            EffectLink::Linear => z[0],
            EffectLink::Radial => {
                let mut sq = 0.0;
                for (k, zk) in z.iter().enumerate() {
                    let c = if k == 0 { 1.0 } else { 0.0 };
                    sq += (zk - c) * (zk - c);
                }
                (-sq).exp()
            }
            EffectLink::Wave => (std::f64::consts::PI * z[0]).cos(),
        }
    }
}

/// Generator parameters. Defaults give a mid-strength effect over eight
/// treatments with mild covariate signal and small noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_treatments: usize,
    /// Dimension of the planted latent treatment vectors.
    pub latent_dim: usize,
    /// Treatment effect scale applied to the link output.
    pub effect_strength: f64,
    /// One slope per informative covariate; counts are centred before the
    /// slope applies. Empty means targets ignore covariates.
    pub covariate_effects: Vec<f64>,
    /// Covariates with no relation to the target.
    pub n_noise_covariates: usize,
    pub noise_sd: f64,
    /// Target mean for a centred patient on a zero-effect treatment.
    pub base_rate: f64,
    pub link: EffectLink,
    pub onset_days: i64,
    pub washout_days: i64,
    /// Length of the post-onset target window in days.
    pub target_days: i64,
    /// Sign-hash bits per treatment; more bits mirror latent geometry
    /// more faithfully.
    pub tokens_per_treatment: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 2000,
            n_treatments: 8,
            latent_dim: 3,
            effect_strength: 0.25,
            covariate_effects: vec![0.08, 0.05, 0.03],
            n_noise_covariates: 3,
            noise_sd: 0.05,
            base_rate: 0.45,
            link: EffectLink::Wave,
            onset_days: 28,
            washout_days: 30,
            target_days: 120,
            tokens_per_treatment: 160,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadConfig(msg));
        if self.n_treatments < 2 {
            return bad(format!("n_treatments must be >= 2, got {}", self.n_treatments));
        }
        if self.n_patients < self.n_treatments {
            return bad(format!(
                "n_patients ({}) must be >= n_treatments ({})",
                self.n_patients, self.n_treatments
            ));
        }
        if self.n_patients > 99_999 {
            return bad(format!(
                "n_patients must be <= 99999 so ids sort lexically, got {}",
                self.n_patients
            ));
        }
        if self.n_treatments > 99 {
            return bad(format!("n_treatments must be <= 99, got {}", self.n_treatments));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return bad(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd));
        }
        if !self.effect_strength.is_finite() {
            return bad("effect_strength must be finite".into());
        }
        if self.covariate_effects.len() > 99 || self.n_noise_covariates > 99 {
            return bad("at most 99 covariates of each kind".into());
        }
        if self.covariate_effects.iter().any(|b| !b.is_finite()) {
            return bad("covariate_effects must be finite".into());
        }
        if !self.base_rate.is_finite() {
            return bad("base_rate must be finite".into());
        }
        if self.onset_days < 0 {
            return bad(format!("onset_days must be >= 0, got {}", self.onset_days));
        }
        if self.washout_days <= 0 {
            return bad(format!("washout_days must be > 0, got {}", self.washout_days));
        }
        if self.target_days < 1 {
            return bad(format!("target_days must be >= 1, got {}", self.target_days));
        }
        if self.tokens_per_treatment < 8 {
            return bad(format!(
                "tokens_per_treatment must be >= 8, got {}",
                self.tokens_per_treatment
            ));
        }
        Ok(())
    }

    pub fn treatment_name(&self, t: usize) -> String {
        format!("synth{t:02}")
    }

    fn treatment_rx_code(&self, t: usize) -> String {
        format!("rx{t:02}")
    }

    fn treatment_kegg_code(&self, t: usize) -> String {
        format!("D9{t:04}")
    }
}

/// Planted ground truth, written to `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Treatment name to planted effect (link output times strength).
    pub effects: BTreeMap<String, f64>,
    /// Treatment name to planted latent vector.
    pub latent_vectors: BTreeMap<String, Vec<f64>>,
}

/// A generated dataset plus its ground truth and per-patient realized
/// targets (whole covered days over the window, the value the cohort
/// module must reconstruct bit-exactly).
#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub events: Vec<EventRecord>,
    pub demographics: BTreeMap<String, Demographics>,
    pub catalog: Vec<TreatmentCatalogEntry>,
    pub feature_specs: Vec<FeatureSpec>,
    pub pipeline: PipelineConfig,
    pub truth: SynthTruth,
    /// File name (`code.txt`) to flat-file content for the KEGG cache.
    pub kegg_files: BTreeMap<String, String>,
    /// Patient id to realized target value.
    pub targets: BTreeMap<String, f64>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector at `base + scale * u` for a random unit nudge `u`.
fn unit_toward(base: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nudge = random_unit(rng, base.len());
    let v: Vec<f64> = base.iter().zip(&nudge).map(|(b, d)| b + scale * d).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Rejection sampler: candidates are accepted once `violation` is <= 0;
/// after 300 tries the least-violating candidate seen is kept.
fn draw_best(
    rng: &mut ChaCha8Rng,
    mut candidate: impl FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    violation: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..300 {
        let v = candidate(rng);
        let score = violation(&v);
        if score <= 0.0 {
            return v;
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, v));
        }
    }
    best.expect("at least one candidate drawn").1
}

/// Latent directions with planted neighbourhood structure. The first
/// `2 * (n/4)` treatments form tight pairs (partner distance about 0.12)
/// whose anchors all sit near one shared hub direction, so paired
/// treatments are close both to their partner and to the centroid of the
/// catalog. The remaining treatments are spread across the opposite
/// hemisphere, far from every other treatment and from the centroid.
/// Nearest-neighbour distance and distance to the mean vector therefore
/// rank the same treatments as familiar.
fn draw_latent_vectors(rng: &mut ChaCha8Rng, n_treatments: usize, dim: usize) -> Vec<Vec<f64>> {
    let n_pairs = n_treatments / 4;
    let n_isolated = n_treatments - 2 * n_pairs;
    let hub = random_unit(rng, dim);

    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let anchor = draw_best(
            rng,
            |r| unit_toward(&hub, 0.55, r),
            |v| {
                // anchors share the hub cone but keep enough spacing that
                // a treatment's nearest neighbour is always its partner
                anchors
                    .iter()
                    .map(|a| dot(a, v) - 0.75)
                    .fold(0.0, f64::max)
            },
        );
        anchors.push(anchor);
    }

    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(n_treatments);
    for anchor in &anchors {
        let partner = unit_toward(anchor, 0.08, rng);
        vectors.push(anchor.clone());
        vectors.push(partner);
    }

    let mut isolated: Vec<Vec<f64>> = Vec::with_capacity(n_isolated);
    let mut sum = vec![0.0; dim];
    for _ in 0..n_isolated {
        let v = draw_best(
            rng,
            |r| random_unit(r, dim),
            |v| {
                // outside the hub cone and spread apart, but with a short
                // running sum: scattered directions keep the treatments
                // mutually unpredictable, and a short sum keeps the
                // catalog centroid anchored at the hub cluster so both
                // to-mean distances rank isolated treatments as novel
                let hub_side = dot(&hub, v) - 0.15;
                let crowding = isolated
                    .iter()
                    .map(|a| dot(a, v) - 0.35)
                    .fold(f64::NEG_INFINITY, f64::max);
                let pulled: f64 = sum
                    .iter()
                    .zip(v)
                    .map(|(s, x)| (s + x) * (s + x))
                    .sum::<f64>()
                    .sqrt();
                hub_side.max(crowding).max(pulled - 1.2)
            },
        );
        for (s, x) in sum.iter_mut().zip(&v) {
            *s += x;
        }
        isolated.push(v);
    }
    vectors.append(&mut isolated);
    vectors
}

struct PatientOutput {
    patient_id: String,
    events: Vec<EventRecord>,
    demographics: Demographics,
    target: f64,
    /// Pre-noise mean landed strictly inside (0, 1).
    interior: bool,
}

fn generate_patient(config: &SynthConfig, effects: &[f64], i: usize) -> PatientOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &[tag::SYNTH_PATIENT, i as u64],
    ));
    let patient_id = format!("p{i:05}");
    let t = i % config.n_treatments;
    let anchor = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let index_date = anchor
        .checked_add_days(Days::new(((i * 7) % 180) as u64))
        .expect("in range");

    let informative: Vec<u32> = (0..config.covariate_effects.len())
        .map(|_| rng.gen_range(0..4u32))
        .collect();
    let noise_counts: Vec<u32> = (0..config.n_noise_covariates)
        .map(|_| rng.gen_range(0..4u32))
        .collect();
    let eps = if config.noise_sd > 0.0 {
        config.noise_sd * standard_normal(&mut rng)
    } else {
        0.0
    };

    let covariate_term: f64 = config
        .covariate_effects
        .iter()
        .zip(&informative)
        .map(|(beta, c)| beta * (f64::from(*c) - 1.5))
        .sum();
    let mean = config.base_rate + covariate_term + effects[t] + eps;
    let pre_noise = mean - eps;
    let clipped = mean.clamp(0.0, 1.0);
    let window = config.target_days;
    let covered = (clipped * window as f64).round() as i64;
    let covered = covered.clamp(0, window);
    let target = covered as f64 / window as f64;

    let mut events = Vec::new();
    let mut push = |date: NaiveDate, kind: EventKind, code: String, supply: u32, quantity: f64| {
        events.push(EventRecord {
            patient_id: patient_id.clone(),
            date,
            kind,
            code,
            days_supply: supply,
            quantity,
        });
    };

    // History events realizing the drawn covariate counts; offsets keep
    // every event inside the six-month lookback and before the index day.
    for (j, count) in informative.iter().enumerate() {
        for m in 0..*count {
            let offset = 5 + 7 * j as u64 + 3 * u64::from(m);
            let date = index_date.checked_sub_days(Days::new(offset)).expect("in range");
            push(date, EventKind::Diagnosis, format!("dx{j:02}"), 0, 1.0);
        }
    }
    for (j, count) in noise_counts.iter().enumerate() {
        for m in 0..*count {
            let offset = 40 + 7 * j as u64 + 3 * u64::from(m);
            let date = index_date.checked_sub_days(Days::new(offset)).expect("in range");
            push(date, EventKind::Diagnosis, format!("nz{j:02}"), 0, 1.0);
        }
    }

    // Treatment fills totalling onset + window days of supply. Odd
    // patients split the course into two fills with a ten-day gap, which
    // must chain into the same block under the washout rule.
    let rx_code = config.treatment_rx_code(t);
    let total_supply = config.onset_days + config.target_days;
    let split = i % 2 == 1 && config.washout_days >= 10 && total_supply >= config.onset_days + 20;
    if split {
        let first = config.onset_days + 10;
        let second = total_supply - first - 10;
        push(index_date, EventKind::Prescription, rx_code.clone(), first as u32, first as f64);
        let refill = index_date
            .checked_add_days(Days::new((first + 10) as u64))
            .expect("in range");
        push(refill, EventKind::Prescription, rx_code, second as u32, second as f64);
    } else {
        push(
            index_date,
            EventKind::Prescription,
            rx_code,
            total_supply as u32,
            total_supply as f64,
        );
    }

    // Steroid fills realizing exactly `covered` days inside the target
    // window, which starts the day after the onset window closes.
    let window_start = index_date
        .checked_add_days(Days::new((config.onset_days + 1) as u64))
        .expect("in range");
    if covered > 0 {
        push(
            window_start,
            EventKind::Prescription,
            "ster01".into(),
            covered as u32,
            covered as f64,
        );
        if i.is_multiple_of(3) && covered >= 4 {
            // Redundant overlapping fill; the union of covered days must
            // not change.
            let half = covered / 2;
            let date = window_start
                .checked_add_days(Days::new(half as u64))
                .expect("in range");
            push(
                date,
                EventKind::Prescription,
                "ster02".into(),
                (covered - half) as u32,
                (covered - half) as f64,
            );
        }
    }
    if i.is_multiple_of(4) && config.onset_days >= 15 {
        // Steroid use during onset; attributable to the flare, so it must
        // not count toward the target.
        push(index_date, EventKind::Prescription, "ster01".into(), 14, 14.0);
    }

    events.sort_by_key(|e| e.date);

    let birth = NaiveDate::from_ymd_opt(
        (1950 + (i * 11) % 45) as i32,
        (1 + i % 12) as u32,
        (1 + i % 28) as u32,
    )
    .expect("valid date");
    let gender = match i % 3 {
        0 => Gender::Female,
        1 => Gender::Male,
        _ => Gender::Unknown,
    };

    PatientOutput {
        patient_id,
        events,
        demographics: Demographics {
            birth_date: birth,
            gender,
        },
        target,
        interior: pre_noise > 0.0 && pre_noise < 1.0,
    }
}

/// Sign-hash bits of a latent vector against shared random hyperplanes.
/// Nearby vectors agree on most bits, so shared-token counts mirror
/// latent angles.
fn sign_bits(hyperplanes: &[Vec<f64>], z: &[f64]) -> Vec<bool> {
    hyperplanes.iter().map(|h| dot(h, z) > 0.0).collect()
}

fn drug_flat_file(code: &str, name: &str, bits: &[bool]) -> String {
    let tokens: Vec<String> = bits
        .iter()
        .enumerate()
        .filter(|(_, b)| **b)
        .map(|(j, _)| format!("sig{j:03}"))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "{:<12}{:<28}Drug", "ENTRY", code);
    let _ = writeln!(out, "{:<12}{}", "NAME", name);
    let _ = writeln!(out, "{:<12}Synthetic agent", "CLASS");
    for (row, chunk) in tokens.chunks(8).enumerate() {
        let keyword = if row == 0 { "EFFICACY" } else { "" };
        let _ = writeln!(out, "{:<12}{}", keyword, chunk.join(", "));
    }
    let _ = writeln!(out, "{:<12}Synthetic indication [DS:{}]", "DISEASE", SYNTH_DISEASE);
    out.push_str("///\n");
    out
}

fn disease_flat_file(config: &SynthConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12}{:<28}Disease", "ENTRY", SYNTH_DISEASE);
    let _ = writeln!(out, "{:<12}Synthetic indication", "NAME");
    for t in 0..config.n_treatments {
        let keyword = if t == 0 { "DRUG" } else { "" };
        let _ = writeln!(
            out,
            "{:<12}{} [DR:{}]",
            keyword,
            config.treatment_name(t),
            config.treatment_kegg_code(t)
        );
    }
    out.push_str("///\n");
    out
}

/// Fragment pair for one sign bit; concatenated fragments give treatments
/// with similar bit patterns similar character n-grams.
fn smiles_fragment(j: usize) -> [u8; 2] {
    const CHARS: [u8; 8] = *b"CNOSPFIB";
    [CHARS[j % 8], CHARS[(j / 8) % 8]]
}

fn synthetic_smiles(bits: &[bool]) -> String {
    let mut out = Vec::new();
    for (j, bit) in bits.iter().enumerate() {
        if *bit {
            out.extend_from_slice(&smiles_fragment(j));
        }
    }
    if out.len() < 3 {
        out.extend_from_slice(b"CCC");
    }
    String::from_utf8(out).expect("ascii fragments")
}

const SYNTH_DISEASE: &str = "H90001";

/// Generates a complete synthetic dataset. Deterministic given
/// `config.seed`; patient streams are derived independently, so the
/// per-patient work runs in parallel without affecting output.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthData, SynthError> {
    config.validate()?;

    let mut latent_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[tag::SYNTH_LATENT]));
    let latent = draw_latent_vectors(&mut latent_rng, config.n_treatments, config.latent_dim);
    let effects: Vec<f64> = latent
        .iter()
        .map(|z| config.effect_strength * config.link.apply(z))
        .collect();

    let patients: Vec<PatientOutput> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(config, &effects, i))
        .collect();

    if !patients.iter().any(|p| p.interior) {
        let lo = effects.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = effects.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span: f64 = 1.5 * config.covariate_effects.iter().map(|b| b.abs()).sum::<f64>();
        return Err(SynthError::Infeasible(format!(
            "every pre-noise target mean saturates outside (0, 1); \
             base_rate {}, covariate span +-{span:.3}, effect range [{lo:.3}, {hi:.3}]",
            config.base_rate
        )));
    }

    let mut events = Vec::new();
    let mut demographics = BTreeMap::new();
    let mut targets = BTreeMap::new();
    for p in patients {
        events.extend(p.events);
        demographics.insert(p.patient_id.clone(), p.demographics);
        targets.insert(p.patient_id, p.target);
    }

    let mut token_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[tag::SYNTH_TOKENS]));
    let hyperplanes: Vec<Vec<f64>> = (0..config.tokens_per_treatment)
        .map(|_| random_unit(&mut token_rng, config.latent_dim))
        .collect();

    let mut catalog = Vec::new();
    let mut kegg_files = BTreeMap::new();
    let mut truth_effects = BTreeMap::new();
    let mut truth_latents = BTreeMap::new();
    for t in 0..config.n_treatments {
        let name = config.treatment_name(t);
        let code = config.treatment_kegg_code(t);
        let bits = sign_bits(&hyperplanes, &latent[t]);
        kegg_files.insert(format!("{code}.txt"), drug_flat_file(&code, &name, &bits));
        catalog.push(TreatmentCatalogEntry {
            generic_name: name.clone(),
            medication_class: "synthetic".into(),
            kegg_code: Some(code),
            smiles: Some(synthetic_smiles(&bits)),
        });
        truth_effects.insert(name.clone(), effects[t]);
        truth_latents.insert(name, latent[t].clone());
    }
    kegg_files.insert(
        format!("{SYNTH_DISEASE}.txt"),
        disease_flat_file(config),
    );

    let mut feature_specs = Vec::new();
    for j in 0..config.covariate_effects.len() {
        feature_specs.push(FeatureSpec {
            name: format!("dx{j:02}_count_6m"),
            kind: FeatureKind::Count,
            codes: vec![format!("dx{j:02}")],
            window: Window::LastMonths(6),
        });
    }
    for j in 0..config.n_noise_covariates {
        feature_specs.push(FeatureSpec {
            name: format!("nz{j:02}_count_6m"),
            kind: FeatureKind::Count,
            codes: vec![format!("nz{j:02}")],
            window: Window::LastMonths(6),
        });
    }
    if !config.covariate_effects.is_empty() {
        feature_specs.push(FeatureSpec {
            name: "any_dx_ever".into(),
            kind: FeatureKind::BinaryPresence,
            codes: (0..config.covariate_effects.len())
                .map(|j| format!("dx{j:02}"))
                .collect(),
            window: Window::Lifetime,
        });
    }
    if config.n_noise_covariates > 0 {
        feature_specs.push(FeatureSpec {
            name: "any_nz_ever".into(),
            kind: FeatureKind::BinaryPresence,
            codes: (0..config.n_noise_covariates)
                .map(|j| format!("nz{j:02}"))
                .collect(),
            window: Window::Lifetime,
        });
    }

    let pipeline = PipelineConfig {
        onset_days: config.onset_days,
        washout_days: config.washout_days,
        steroid_codes: BTreeSet::from(["ster01".to_string(), "ster02".to_string()]),
        treatment_codes: (0..config.n_treatments)
            .map(|t| (config.treatment_rx_code(t), config.treatment_name(t)))
            .collect(),
    };

    Ok(SynthData {
        config: config.clone(),
        events,
        demographics,
        catalog,
        feature_specs,
        pipeline,
        truth: SynthTruth {
            effects: truth_effects,
            latent_vectors: truth_latents,
        },
        kegg_files,
        targets,
    })
}

impl SynthData {
    /// Writes the dataset directory: the three ingest files, the two JSON
    /// configs, `truth.json` and the KEGG cache. Byte-identical for the
    /// same config.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        ingest::write_events(&dir.join(dataset::EVENTS_FILE), &self.events)?;
        ingest::write_demographics(&dir.join(dataset::DEMOGRAPHICS_FILE), &self.demographics)?;
        ingest::write_treatment_catalog(&dir.join(dataset::CATALOG_FILE), &self.catalog)?;
        dataset::save_feature_specs(&dir.join(dataset::FEATURES_FILE), &self.feature_specs)?;
        self.pipeline.save(&dir.join(dataset::PIPELINE_FILE))?;
        let truth_path = dir.join(dataset::TRUTH_FILE);
        let mut text = serde_json::to_string_pretty(&self.truth)?;
        text.push('\n');
        std::fs::write(&truth_path, text).map_err(io_err(&truth_path))?;
        let cache = dir.join(dataset::KEGG_CACHE_DIR);
        std::fs::create_dir_all(&cache).map_err(io_err(&cache))?;
        for (file, content) in &self.kegg_files {
            let path = cache.join(file);
            std::fs::write(&path, content).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort;
    use crate::kegg::{self, KeggClient};

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_patients: 200,
            n_treatments: 8,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = small_config();
        c.n_treatments = 1;
        assert!(matches!(c.validate(), Err(SynthError::BadConfig(_))));
        let mut c = small_config();
        c.n_patients = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.noise_sd = -0.1;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.latent_dim = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.target_days = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn saturating_config_is_infeasible() {
        let config = SynthConfig {
            base_rate: 5.0,
            ..small_config()
        };
        match generate_synthetic(&config) {
            Err(SynthError::Infeasible(msg)) => {
                assert!(msg.contains("base_rate 5"), "diagnostic was {msg:?}");
            }
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_writes_byte_identical_files() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        a.write_to_dir(dir_a.path()).unwrap();
        b.write_to_dir(dir_b.path()).unwrap();
        for name in [
            dataset::EVENTS_FILE,
            dataset::DEMOGRAPHICS_FILE,
            dataset::CATALOG_FILE,
            dataset::FEATURES_FILE,
            dataset::PIPELINE_FILE,
            dataset::TRUTH_FILE,
        ] {
            let bytes_a = std::fs::read(dir_a.path().join(name)).unwrap();
            let bytes_b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{name} differs between same-seed runs");
        }
        let other = generate_synthetic(&SynthConfig {
            seed: 12,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.targets, other.targets);
    }

    #[test]
    fn cohort_reconstructs_planted_targets_exactly() {
        let data = generate_synthetic(&small_config()).unwrap();
        let blocks = cohort::build_treatment_blocks(
            &data.events,
            &data.pipeline.treatment_codes,
            data.pipeline.washout_days,
            data.pipeline.onset_days,
        )
        .unwrap();
        assert_eq!(blocks.len(), data.config.n_patients, "one block per patient");
        let table = cohort::build_master_table(
            &blocks,
            &data.events,
            &data.feature_specs,
            &data.demographics,
            &data.pipeline.steroid_codes,
        )
        .unwrap();
        assert_eq!(table.degenerate_blocks, 0);
        assert_eq!(table.rows.len(), data.config.n_patients);
        for row in &table.rows {
            let planted = data.targets[&row.patient_id];
            assert_eq!(
                row.target.value(),
                planted,
                "target mismatch for {}",
                row.patient_id
            );
        }
    }

    #[test]
    fn zero_noise_targets_follow_the_analytic_formula() {
        let config = SynthConfig {
            noise_sd: 0.0,
            ..small_config()
        };
        let data = generate_synthetic(&config).unwrap();
        let table = {
            let blocks = cohort::build_treatment_blocks(
                &data.events,
                &data.pipeline.treatment_codes,
                data.pipeline.washout_days,
                data.pipeline.onset_days,
            )
            .unwrap();
            cohort::build_master_table(
                &blocks,
                &data.events,
                &data.feature_specs,
                &data.demographics,
                &data.pipeline.steroid_codes,
            )
            .unwrap()
        };
        // Covariate layout: age, gender, then the informative counts.
        let n_inf = config.covariate_effects.len();
        for row in &table.rows {
            let counts = &row.covariates[2..2 + n_inf];
            let covariate_term: f64 = config
                .covariate_effects
                .iter()
                .zip(counts)
                .map(|(beta, c)| beta * (c - 1.5))
                .sum();
            let mean = config.base_rate + covariate_term + data.truth.effects[&row.treatment];
            let window = config.target_days as f64;
            let expected = (mean.clamp(0.0, 1.0) * window).round() / window;
            assert_eq!(row.target.value(), expected, "patient {}", row.patient_id);
        }
    }

    #[test]
    fn null_effect_leaves_targets_independent_of_treatment() {
        let config = SynthConfig {
            effect_strength: 0.0,
            n_patients: 1200,
            seed: 5,
            ..small_config()
        };
        let data = generate_synthetic(&config).unwrap();
        assert!(data.truth.effects.values().all(|e| *e == 0.0));
        let mut sums = vec![(0.0, 0usize); config.n_treatments];
        for (pid, target) in &data.targets {
            let i: usize = pid[1..].parse().unwrap();
            let t = i % config.n_treatments;
            sums[t].0 += target;
            sums[t].1 += 1;
        }
        let means: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            hi - lo < 0.06,
            "treatment means should be near-equal under a null effect, got {means:?}"
        );
    }

    #[test]
    fn realized_targets_recover_planted_effects_with_unit_slope() {
        let config = SynthConfig {
            seed: 3,
            ..SynthConfig::default()
        };
        assert!(config.n_patients >= 2000);
        let data = generate_synthetic(&config).unwrap();
        let effects: Vec<f64> = (0..config.n_treatments)
            .map(|t| data.truth.effects[&config.treatment_name(t)])
            .collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (pid, target) in &data.targets {
            let i: usize = pid[1..].parse().unwrap();
            xs.push(effects[i % config.n_treatments]);
            ys.push(*target);
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let slope = cov / var;
        assert!(
            (slope - 1.0).abs() <= 0.1,
            "regression of targets on planted effects should have slope 1 +- 0.1, got {slope}"
        );
    }

    fn ranks(values: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut out = vec![0.0; values.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &idx in &order[i..=j] {
                out[idx] = avg;
            }
            i = j + 1;
        }
        out
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let ra = ranks(a);
        let rb = ranks(b);
        let n = ra.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    fn euclid(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn token_bag_embeddings_mirror_latent_geometry() {
        for seed in [0, 1, 2] {
            let config = SynthConfig {
                n_patients: 16,
                seed,
                ..SynthConfig::default()
            };
            let data = generate_synthetic(&config).unwrap();
            let dir = tempfile::tempdir().unwrap();
            data.write_to_dir(dir.path()).unwrap();
            let client = KeggClient::new(dir.path().join(dataset::KEGG_CACHE_DIR), false);
            let (embedding, _, _) =
                kegg::catalog_kegg_embedding(&client, &data.catalog, 3).unwrap();
            let names: Vec<String> = (0..config.n_treatments)
                .map(|t| config.treatment_name(t))
                .collect();
            let mut latent_d = Vec::new();
            let mut embed_d = Vec::new();
            for a in 0..names.len() {
                for b in (a + 1)..names.len() {
                    latent_d.push(euclid(
                        &data.truth.latent_vectors[&names[a]],
                        &data.truth.latent_vectors[&names[b]],
                    ));
                    embed_d.push(euclid(
                        embedding.get(&names[a]).unwrap(),
                        embedding.get(&names[b]).unwrap(),
                    ));
                }
            }
            let rho = spearman(&latent_d, &embed_d);
            assert!(
                rho >= 0.8,
                "seed {seed}: embedding distances should track latent distances, rho = {rho:.3}"
            );
        }
    }

    #[test]
    fn generated_flat_files_parse_with_the_kegg_parser() {
        let data = generate_synthetic(&small_config()).unwrap();
        let disease = data.kegg_files[&format!("{SYNTH_DISEASE}.txt")].clone();
        let parsed = kegg::parse::parse_disease_entry(&disease).unwrap();
        assert_eq!(parsed.code, SYNTH_DISEASE);
        assert_eq!(parsed.drugs.len(), data.config.n_treatments);
        for t in 0..data.config.n_treatments {
            let code = data.config.treatment_kegg_code(t);
            let record =
                kegg::parse::parse_drug_entry(&data.kegg_files[&format!("{code}.txt")]).unwrap();
            assert_eq!(record.code, code);
            assert_eq!(record.diseases, vec![SYNTH_DISEASE.to_string()]);
            assert!(
                !record.efficacy.is_empty(),
                "every drug should carry sign tokens"
            );
        }
    }

    #[test]
    fn written_directory_loads_as_a_dataset() {
        let data = generate_synthetic(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write_to_dir(dir.path()).unwrap();
        let loaded = dataset::load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.events.len(), data.events.len());
        assert_eq!(loaded.pipeline, data.pipeline);
        assert_eq!(loaded.feature_specs, data.feature_specs);
        let table = loaded.build_master_table().unwrap();
        assert_eq!(table.rows.len(), data.config.n_patients);
        assert!(loaded.kegg_cache_dir().join("D90000.txt").is_file());
    }
}
