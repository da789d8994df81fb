//! Deterministic synthetic MD/ND sessions with controllable stress effects.
//!
//! Every channel is an AR(1) process with marginal standard deviation `sigma`
//! around a per-channel base level plus a per-subject offset shared by both
//! drives. MD drives add the configured effects inside their phases. Each
//! channel draws from its own RNG stream keyed by
//! `(seed, subject, condition, modality, channel)`, so configurations that
//! differ only in effects produce identical baselines.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    phase_at, write_session, DriveCondition, Modality, PhaseInterval, PhaseLabel, RawStream, SessionRecording,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// Adds `magnitude * sigma` to the level.
    MeanShift,
    /// Scales the zero-mean AR component, and hence every frame-to-frame
    /// difference, by `1 + magnitude`.
    VelocityBoost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub channel: String,
    pub kind: EffectKind,
    pub magnitude: f64,
    pub phases: Vec<PhaseLabel>,
}

/// Base level and marginal std of one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub base: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub sample_rate_hz: BTreeMap<Modality, f64>,
    /// Durations of P1..P5 in seconds.
    pub phase_durations_s: [f64; 5],
    pub ar_rho: f64,
    /// Per-subject offset std, in sigma units.
    pub subject_offset_sd: f64,
    /// Default scale per modality.
    pub modality_scale: BTreeMap<Modality, ChannelScale>,
    /// Per-channel overrides.
    #[serde(default)]
    pub channel_scale: BTreeMap<String, ChannelScale>,
    pub effects: Vec<EffectSpec>,
    pub bio_lag_s: f64,
    pub seed: u64,
}

pub const PRESETS: [&str; 3] = ["stats_38", "separable_strong", "weak_bio"];

fn base_config(n_subjects: usize, phase_s: f64, seed: u64) -> SynthConfig {
    let rates = Modality::ALL.into_iter().map(|m| (m, 5.0)).collect();
    let modality_scale = [
        (Modality::Facial, ChannelScale { base: 0.0, sigma: 0.5 }),
        (Modality::Bio, ChannelScale { base: 0.0, sigma: 1.0 }),
        (Modality::Gaze, ChannelScale { base: 0.0, sigma: 0.1 }),
    ]
    .into_iter()
    .collect();
    let mut channel_scale = BTreeMap::new();
    for (i, name) in Modality::Facial.channel_names().into_iter().enumerate() {
        if i >= crate::data_model::N_EXPRESSION {
            channel_scale.insert(name, ChannelScale { base: 0.0, sigma: 0.05 });
        }
    }
    channel_scale.insert("pp".into(), ChannelScale { base: 0.01, sigma: 0.002 });
    channel_scale.insert("hr".into(), ChannelScale { base: 75.0, sigma: 3.0 });
    channel_scale.insert("br".into(), ChannelScale { base: 16.0, sigma: 1.5 });
    SynthConfig {
        n_subjects,
        sample_rate_hz: rates,
        phase_durations_s: [phase_s; 5],
        ar_rho: 0.5,
        subject_offset_sd: 1.0,
        modality_scale,
        channel_scale,
        effects: Vec::new(),
        bio_lag_s: 2.0,
        seed,
    }
}

fn stressors() -> Vec<PhaseLabel> {
    vec![PhaseLabel::P2, PhaseLabel::P4]
}

fn effect(channel: &str, kind: EffectKind, magnitude: f64) -> EffectSpec {
    EffectSpec { channel: channel.to_string(), kind, magnitude, phases: stressors() }
}

fn strong_facial_effects() -> Vec<EffectSpec> {
    let mut out = Vec::new();
    for i in 0..20 {
        out.push(effect(&format!("exp_{i:02}"), EffectKind::VelocityBoost, 1.5));
    }
    for i in 20..30 {
        out.push(effect(&format!("exp_{i:02}"), EffectKind::MeanShift, 1.5));
    }
    out.push(effect("gaze_x", EffectKind::VelocityBoost, 1.0));
    out.push(effect("gaze_y", EffectKind::VelocityBoost, 1.0));
    out
}

/// Named benchmark configurations.
pub fn benchmark_preset(name: &str) -> Result<SynthConfig> {
    match name {
        "stats_38" => {
            let mut cfg = base_config(24, 60.0, 38);
            cfg.effects = (0..38).map(|i| effect(&format!("exp_{i:02}"), EffectKind::VelocityBoost, 1.0)).collect();
            Ok(cfg)
        }
        "separable_strong" => {
            let mut cfg = base_config(25, 36.0, 7);
            cfg.effects = strong_facial_effects();
            cfg.effects.push(effect("hr", EffectKind::MeanShift, 1.0));
            cfg.effects.push(effect("pp", EffectKind::MeanShift, 1.0));
            cfg.effects.push(effect("br", EffectKind::VelocityBoost, 0.5));
            Ok(cfg)
        }
        "weak_bio" => {
            let mut cfg = base_config(25, 36.0, 7);
            cfg.effects = strong_facial_effects();
            Ok(cfg)
        }
        other => Err(Error::Config(format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")))),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be positive".into()));
        }
        if self.phase_durations_s.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Config("phase durations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ar_rho) {
            return Err(Error::Config("ar_rho must lie in [0, 1)".into()));
        }
        if !(self.subject_offset_sd.is_finite() && self.subject_offset_sd >= 0.0) || !self.bio_lag_s.is_finite() {
            return Err(Error::Config("offset sd and bio lag must be finite".into()));
        }
        for m in Modality::ALL {
            let fs = self.sample_rate_hz.get(&m).copied().unwrap_or(0.0);
            if !(fs.is_finite() && fs > 0.0) {
                return Err(Error::Config(format!("{m} sample rate must be positive")));
            }
            if !self.modality_scale.contains_key(&m) {
                return Err(Error::Config(format!("{m} has no default channel scale")));
            }
        }
        let known: Vec<String> = Modality::ALL.iter().flat_map(|m| m.channel_names()).collect();
        for e in &self.effects {
            if !known.contains(&e.channel) {
                return Err(Error::Config(format!("effect on unknown channel `{}`", e.channel)));
            }
            if !e.magnitude.is_finite() || (e.kind == EffectKind::VelocityBoost && e.magnitude <= -1.0) {
                return Err(Error::Config(format!("bad effect magnitude on `{}`", e.channel)));
            }
            if e.phases.iter().any(|p| !p.is_stressor()) {
                return Err(Error::Config("effects are restricted to P2 and P4".into()));
            }
        }
        Ok(())
    }

    pub fn phase_intervals(&self) -> Vec<PhaseInterval> {
        let mut start = 0.0;
        PhaseLabel::ALL
            .iter()
            .zip(self.phase_durations_s)
            .map(|(&label, d)| {
                let iv = PhaseInterval { label, start_s: start, end_s: start + d };
                start += d;
                iv
            })
            .collect()
    }

    fn scale(&self, modality: Modality, channel: &str) -> ChannelScale {
        self.channel_scale.get(channel).copied().unwrap_or(self.modality_scale[&modality])
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |h, &p| mix(h ^ mix(p)))
}

fn modality_code(m: Modality) -> u64 {
    match m {
        Modality::Facial => 1,
        Modality::Bio => 2,
        Modality::Gaze => 3,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPair {
    pub subject_id: String,
    pub md: SessionRecording,
    pub nd: SessionRecording,
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

/// Paired MD and ND sessions for every subject.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SubjectPair>> {
    cfg.validate()?;
    let intervals = cfg.phase_intervals();
    let total_s: f64 = cfg.phase_durations_s.iter().sum();
    (0..cfg.n_subjects)
        .map(|s| {
            let id = subject_id(s);
            let md = session(cfg, s, &id, DriveCondition::MD, &intervals, total_s);
            let nd = session(cfg, s, &id, DriveCondition::ND, &intervals, total_s);
            Ok(SubjectPair { subject_id: id, md, nd })
        })
        .collect()
}

fn session(
    cfg: &SynthConfig,
    subject: usize,
    id: &str,
    condition: DriveCondition,
    intervals: &[PhaseInterval],
    total_s: f64,
) -> SessionRecording {
    let cond_code = match condition {
        DriveCondition::ND => 0,
        DriveCondition::MD => 1,
    };
    let mut streams = BTreeMap::new();
    for modality in Modality::ALL {
        let fs = cfg.sample_rate_hz[&modality];
        let n = (total_s * fs).round() as usize;
        let timestamps: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
        let lag = if modality == Modality::Bio { cfg.bio_lag_s } else { 0.0 };
        let effect_phase: Vec<Option<PhaseLabel>> = timestamps.iter().map(|&t| phase_at(intervals, t - lag)).collect();
        let names = modality.channel_names();
        let mut values = Matrix::zeros(n, names.len());
        for (c, name) in names.iter().enumerate() {
            let sc = cfg.scale(modality, name);
            let key = [cfg.seed, subject as u64, modality_code(modality), c as u64];
            let mut offset_rng = ChaCha8Rng::seed_from_u64(stream_seed(&key));
            let offset: f64 = offset_rng.sample::<f64, _>(StandardNormal) * cfg.subject_offset_sd * sc.sigma;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[key[0], key[1], key[2], key[3], 10 + cond_code]));
            let innovation = (1.0 - cfg.ar_rho * cfg.ar_rho).sqrt();
            let mut b: f64 = rng.sample(StandardNormal);
            let effects: Vec<&EffectSpec> = if condition == DriveCondition::MD {
                cfg.effects.iter().filter(|e| &e.channel == name).collect()
            } else {
                Vec::new()
            };
            for t in 0..n {
                if t > 0 {
                    b = cfg.ar_rho * b + innovation * rng.sample::<f64, _>(StandardNormal);
                }
                let (mut shift, mut gain) = (0.0, 1.0);
                if let Some(p) = effect_phase[t] {
                    for e in effects.iter().filter(|e| e.phases.contains(&p)) {
                        match e.kind {
                            EffectKind::MeanShift => shift += e.magnitude,
                            EffectKind::VelocityBoost => gain *= 1.0 + e.magnitude,
                        }
                    }
                }
                values.set(t, c, sc.base + offset + sc.sigma * (gain * b + shift));
            }
        }
        streams.insert(modality, RawStream { modality, timestamps, channel_names: names, values, sample_rate_hz: fs });
    }
    SessionRecording {
        subject_id: id.to_string(),
        condition,
        streams,
        phase_intervals: intervals.to_vec(),
        cleaning: BTreeMap::new(),
    }
}

/// Directory name of one session under a data root.
pub fn session_dir_name(subject_id: &str, condition: DriveCondition) -> String {
    format!("{subject_id}_{condition}")
}

/// Writes every session as `<root>/<subject>_<condition>/`.
pub fn write_sessions(root: &Path, pairs: &[SubjectPair]) -> Result<()> {
    for p in pairs {
        for s in [&p.md, &p.nd] {
            write_session(&root.join(session_dir_name(&s.subject_id, s.condition)), s)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ingest_session, SessionPaths};

    fn small(effects: Vec<EffectSpec>) -> SynthConfig {
        let mut cfg = base_config(3, 4.0, 11);
        cfg.effects = effects;
        cfg
    }

    #[test]
    fn presets_are_valid() {
        for name in PRESETS {
            benchmark_preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(benchmark_preset("nope"), Err(Error::Config(_))));
        let stats = benchmark_preset("stats_38").unwrap();
        assert_eq!(stats.effects.len(), 38);
        assert!(stats.effects.iter().all(|e| e.kind == EffectKind::VelocityBoost));
        let weak = benchmark_preset("weak_bio").unwrap();
        assert!(weak.effects.iter().all(|e| !crate::data_model::BIO_CHANNELS.contains(&e.channel.as_str())));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(vec![]);
        cfg.phase_durations_s[2] = 0.0;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = small(vec![EffectSpec { channel: "exp_00".into(), kind: EffectKind::MeanShift, magnitude: 1.0, phases: vec![PhaseLabel::P3] }]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn streams_satisfy_invariants_and_are_deterministic() {
        let cfg = small(vec![effect("exp_00", EffectKind::MeanShift, 2.0)]);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        for p in &a {
            for s in [&p.md, &p.nd] {
                assert_eq!(s.streams.len(), 3);
                for st in s.streams.values() {
                    st.validate().unwrap();
                    assert_eq!(st.len(), 100);
                }
            }
        }
    }

    #[test]
    fn nd_and_unaffected_channels_match_across_effect_configs() {
        let plain = generate(&small(vec![])).unwrap();
        let boosted = generate(&small(vec![effect("exp_00", EffectKind::VelocityBoost, 1.0)])).unwrap();
        for (p, q) in plain.iter().zip(&boosted) {
            assert_eq!(p.nd, q.nd);
            let (a, b) = (&p.md.streams[&Modality::Facial].values, &q.md.streams[&Modality::Facial].values);
            for t in 0..a.rows() {
                for c in 1..a.cols() {
                    assert_eq!(a.get(t, c), b.get(t, c));
                }
            }
        }
    }

    #[test]
    fn velocity_boost_scales_differences_inside_effect_phase() {
        let m = 1.5;
        let plain = generate(&small(vec![])).unwrap();
        let boosted = generate(&small(vec![effect("exp_00", EffectKind::VelocityBoost, m)])).unwrap();
        let (a, b) = (&plain[0].md.streams[&Modality::Facial], &boosted[0].md.streams[&Modality::Facial]);
        // P2 covers t in [4, 8): frames 20..40 at 5 Hz
        for t in 21..40 {
            let da = a.values.get(t, 0) - a.values.get(t - 1, 0);
            let db = b.values.get(t, 0) - b.values.get(t - 1, 0);
            assert!((db - (1.0 + m) * da).abs() < 1e-12);
        }
        for t in 1..20 {
            assert_eq!(a.values.get(t, 0), b.values.get(t, 0));
        }
    }

    #[test]
    fn bio_effects_are_lagged() {
        let cfg = small(vec![effect("hr", EffectKind::MeanShift, 2.0)]);
        let plain = generate(&small(vec![])).unwrap();
        let shifted = generate(&cfg).unwrap();
        let (a, b) = (&plain[0].md.streams[&Modality::Bio], &shifted[0].md.streams[&Modality::Bio]);
        let sigma = 3.0;
        for t in 0..a.len() {
            let ts = a.timestamps[t];
            let inside = [(4.0, 8.0), (12.0, 16.0)].iter().any(|(s, e)| ts - 2.0 >= *s && ts - 2.0 < *e);
            let d = b.values.get(t, 1) - a.values.get(t, 1);
            let expected = if inside { 2.0 * sigma } else { 0.0 };
            assert!((d - expected).abs() < 1e-9, "t={ts}");
        }
    }

    #[test]
    fn written_sessions_reingest_without_drops() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate(&small(vec![])).unwrap();
        write_sessions(dir.path(), &pairs).unwrap();
        let back = ingest_session(&SessionPaths::in_dir(&dir.path().join("S01_MD"))).unwrap();
        assert!(back.cleaning.values().all(|c| c.dropped() == 0 && c.rows_kept == 100));
        assert_eq!(back.phase_intervals, pairs[0].md.phase_intervals);
        for (m, s) in &back.streams {
            assert_eq!(s.values, pairs[0].md.streams[m].values);
        }
    }
}
