//! Engineered features: facial derivatives, gaze dynamics, windowing and
//! labels, the MD-ND velocity-difference descriptor, model input assembly
//! and train-only normalization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_model::{DriveCondition, FeatureSequence, PhaseLabel, N_FACIAL};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_WINDOW_S: f64 = 9.0;
pub const DEFAULT_STRESS_THRESHOLD: f64 = 0.4;
/// Standard deviations below this are replaced by 1.
pub const STD_FLOOR: f64 = 1e-8;

pub const GAZE_DYNAMICS_CHANNELS: [&str; 11] = [
    "v_x", "v_y", "speed", "a_x", "a_y", "a_mag", "roll_mean_1s", "roll_std_1s", "roll_mean_3s", "roll_std_3s",
    "dispersion_2s",
];

fn check_facial(seq: &FeatureSequence) -> Result<()> {
    if seq.n_channels() != N_FACIAL {
        return Err(Error::Schema(format!("facial sequence needs {N_FACIAL} channels, got {}", seq.n_channels())));
    }
    Ok(())
}

/// Frame-to-frame differences; the first frame's difference is zero.
pub fn frame_differences(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 1..x.rows() {
        let (prev, cur) = (x.row(t - 1), x.row(t));
        for (o, (c, p)) in out.row_mut(t).iter_mut().zip(cur.iter().zip(prev)) {
            *o = c - p;
        }
    }
    out
}

pub fn facial_derivatives(seq: &FeatureSequence) -> Result<FeatureSequence> {
    check_facial(seq)?;
    Ok(FeatureSequence {
        values: frame_differences(&seq.values),
        channel_names: seq.channel_names.iter().map(|n| format!("d_{n}")).collect(),
        sample_rate_hz: seq.sample_rate_hz,
        phase_of_frame: seq.phase_of_frame.clone(),
        valid: seq.valid.clone(),
    })
}

/// Population mean and std of a slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Trailing-window population statistics; prefixes shorter than `w` use
/// every frame available.
fn rolling(xs: &[f64], w: usize) -> (Vec<f64>, Vec<f64>) {
    let w = w.max(1);
    let mut means = Vec::with_capacity(xs.len());
    let mut stds = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let lo = (t + 1).saturating_sub(w);
        let (m, s) = mean_std(&xs[lo..=t]);
        means.push(m);
        stds.push(s);
    }
    (means, stds)
}

pub fn gaze_dynamics(seq: &FeatureSequence) -> Result<FeatureSequence> {
    let (ix, iy) = match (seq.channel_index("gaze_x"), seq.channel_index("gaze_y")) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Schema("gaze sequence needs gaze_x and gaze_y".into())),
    };
    if !(seq.sample_rate_hz > 0.0) {
        return Err(Error::Config("gaze sample rate must be positive".into()));
    }
    let n = seq.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("gaze dynamics need at least 2 frames, got {n}")));
    }
    let fs = seq.sample_rate_hz;
    let x = seq.values.column(ix);
    let y = seq.values.column(iy);
    let diff = |s: &[f64]| -> Vec<f64> {
        let mut d = vec![0.0; s.len()];
        for t in 1..s.len() {
            d[t] = (s[t] - s[t - 1]) * fs;
        }
        d
    };
    let vx = diff(&x);
    let vy = diff(&y);
    let mut ax = diff(&vx);
    let mut ay = diff(&vy);
    // v[0] is a fill value, so a[1] has no valid predecessor either
    ax[1] = 0.0;
    ay[1] = 0.0;
    let speed: Vec<f64> = vx.iter().zip(&vy).map(|(a, b)| a.hypot(*b)).collect();
    let amag: Vec<f64> = ax.iter().zip(&ay).map(|(a, b)| a.hypot(*b)).collect();
    let w1 = (fs).round() as usize;
    let w2 = (2.0 * fs).round() as usize;
    let w3 = (3.0 * fs).round() as usize;
    let (rm1, rs1) = rolling(&speed, w1);
    let (rm3, rs3) = rolling(&speed, w3);
    let (_, sx) = rolling(&x, w2);
    let (_, sy) = rolling(&y, w2);
    let disp: Vec<f64> = sx.iter().zip(&sy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let cols = [&vx, &vy, &speed, &ax, &ay, &amag, &rm1, &rs1, &rm3, &rs3, &disp];
    let mut values = Matrix::zeros(n, cols.len());
    for t in 0..n {
        for (c, col) in cols.iter().enumerate() {
            values.set(t, c, col[t]);
        }
    }
    Ok(FeatureSequence {
        values,
        channel_names: GAZE_DYNAMICS_CHANNELS.iter().map(|s| s.to_string()).collect(),
        sample_rate_hz: fs,
        phase_of_frame: seq.phase_of_frame.clone(),
        valid: seq.valid.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StressLabel {
    NoStress,
    Stress,
}

impl StressLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            StressLabel::Stress => 1.0,
            StressLabel::NoStress => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StressLabel::Stress => "stress",
            StressLabel::NoStress => "no_stress",
        }
    }
}

/// Fixed-length window cut from one session's sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub subject_id: String,
    pub condition: DriveCondition,
    pub phase_mode: PhaseLabel,
    /// Position on the session's window grid (counted from frame 0).
    pub window_index: usize,
    pub start_frame: usize,
    /// `T x F`
    pub frames: Matrix,
    pub label: StressLabel,
    pub stress_ratio: f64,
    pub baseline_descriptor: Option<Vec<f64>>,
}

/// Frames per window: `round(window_s * fs)`.
pub fn window_length(window_s: f64, sample_rate_hz: f64) -> Result<usize> {
    if !(window_s > 0.0 && window_s.is_finite()) {
        return Err(Error::Config(format!("window length must be positive, got {window_s}")));
    }
    let t = (window_s * sample_rate_hz).round() as usize;
    if t < 2 {
        return Err(Error::Config(format!("window of {window_s} s at {sample_rate_hz} Hz has {t} frames (< 2)")));
    }
    Ok(t)
}

/// Stress ratio, label and dominant phase for a run of phase labels.
/// Ties in the dominant phase go to the earlier phase; a window with no
/// phased frame at all has no dominant phase.
pub fn label_frames(phases: &[Option<PhaseLabel>], threshold: f64) -> (f64, StressLabel, Option<PhaseLabel>) {
    let n = phases.len() as f64;
    let stress = phases.iter().filter(|p| p.is_some_and(PhaseLabel::is_stressor)).count() as f64;
    let ratio = stress / n;
    let label = if ratio > threshold { StressLabel::Stress } else { StressLabel::NoStress };
    let mut counts = [0usize; 5];
    for p in phases.iter().flatten() {
        counts[*p as usize] += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 && best.map_or(true, |(_, bc)| c > bc) {
            best = Some((i, c));
        }
    }
    (ratio, label, best.map(|(i, _)| PhaseLabel::ALL[i]))
}

/// Non-overlapping windows from frame 0; the trailing remainder is dropped.
/// Windows touching an invalid (unaligned) frame or carrying no phase at
/// all are skipped but keep their grid position in `window_index`.
pub fn segment_windows(
    seq: &FeatureSequence,
    subject_id: &str,
    condition: DriveCondition,
    window_s: f64,
    stress_threshold: f64,
) -> Result<Vec<Window>> {
    let t = window_length(window_s, seq.sample_rate_hz)?;
    let n = seq.len() / t;
    let mut out = Vec::with_capacity(n);
    for w in 0..n {
        let start = w * t;
        if seq.valid[start..start + t].iter().any(|v| !v) {
            continue;
        }
        let (ratio, label, mode) = label_frames(&seq.phase_of_frame[start..start + t], stress_threshold);
        let Some(phase_mode) = mode else { continue };
        out.push(Window {
            subject_id: subject_id.to_string(),
            condition,
            phase_mode,
            window_index: w,
            start_frame: start,
            frames: seq.values.slice_rows(start, t),
            label,
            stress_ratio: ratio,
            baseline_descriptor: None,
        });
    }
    Ok(out)
}

/// `(1/(T-1)) * sum_{t=2..T} (dx_md(t) - dx_nd(t))`, per channel.
pub fn velocity_difference_descriptor(md: &Matrix, nd: &Matrix) -> Result<Vec<f64>> {
    if md.rows() != nd.rows() || md.cols() != nd.cols() {
        return Err(Error::Shape(format!(
            "MD window {}x{} vs ND window {}x{}",
            md.rows(),
            md.cols(),
            nd.rows(),
            nd.cols()
        )));
    }
    let a = mean_frame_difference(md)?;
    let b = mean_frame_difference(nd)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// `(1/(T-1)) * sum_{t=2..T} dx(t)` per channel.
pub fn mean_frame_difference(x: &Matrix) -> Result<Vec<f64>> {
    let t = x.rows();
    if t < 2 {
        return Err(Error::Shape(format!("window needs at least 2 frames, got {t}")));
    }
    let mut acc = vec![0.0; x.cols()];
    for r in 1..t {
        for (a, (c, p)) in acc.iter_mut().zip(x.row(r).iter().zip(x.row(r - 1))) {
            *a += c - p;
        }
    }
    Ok(acc.into_iter().map(|v| v / (t - 1) as f64).collect())
}

/// Assigns baseline descriptors to MD windows of one subject.
///
/// Windows pair on (phase, ordinal among that phase's windows). An MD window
/// without an ND partner falls back to the mean ND frame difference over the
/// phase's ND windows; with no ND window in the phase the descriptor is zero
/// and a warning is returned.
pub fn attach_baselines(md: &mut [Window], nd: &[Window]) -> Result<Vec<String>> {
    let mut nd_by_phase: BTreeMap<PhaseLabel, Vec<&Window>> = BTreeMap::new();
    for w in nd {
        nd_by_phase.entry(w.phase_mode).or_default().push(w);
    }
    let mut ordinal: BTreeMap<PhaseLabel, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for w in md.iter_mut() {
        let k = ordinal.entry(w.phase_mode).or_insert(0);
        let idx = *k;
        *k += 1;
        let partners = nd_by_phase.get(&w.phase_mode).map(Vec::as_slice).unwrap_or(&[]);
        let descriptor = if let Some(p) = partners.get(idx) {
            velocity_difference_descriptor(&w.frames, &p.frames)?
        } else if !partners.is_empty() {
            let mut nd_mean = vec![0.0; w.frames.cols()];
            for p in partners {
                if p.frames.cols() != w.frames.cols() {
                    return Err(Error::Shape("ND window channel count differs".into()));
                }
                for (a, v) in nd_mean.iter_mut().zip(mean_frame_difference(&p.frames)?) {
                    *a += v / partners.len() as f64;
                }
            }
            mean_frame_difference(&w.frames)?.iter().zip(&nd_mean).map(|(a, b)| a - b).collect()
        } else {
            warnings.push(format!(
                "subject {}: no ND window in phase {}; zero baseline for MD window {}",
                w.subject_id, w.phase_mode, w.window_index
            ));
            vec![0.0; w.frames.cols()]
        };
        w.baseline_descriptor = Some(descriptor);
    }
    Ok(warnings)
}

/// Per-frame model input `[facial | deltas? | baseline? | secondary?]`.
pub fn assemble_model_input(
    facial: &Matrix,
    include_delta: bool,
    baseline: Option<&[f64]>,
    secondary: Option<&Matrix>,
) -> Result<Matrix> {
    if facial.cols() != N_FACIAL {
        return Err(Error::Schema(format!("facial window needs {N_FACIAL} channels, got {}", facial.cols())));
    }
    let t = facial.rows();
    let deltas = include_delta.then(|| frame_differences(facial));
    let base = match baseline {
        Some(b) if b.len() != N_FACIAL => {
            return Err(Error::Shape(format!("baseline descriptor has {} entries, expected {N_FACIAL}", b.len())))
        }
        Some(b) => Some(Matrix::new(t, N_FACIAL, b.iter().copied().cycle().take(t * N_FACIAL).collect())?),
        None => None,
    };
    if let Some(s) = secondary {
        if s.rows() != t {
            return Err(Error::Shape(format!("secondary stream has {} frames, window has {t}", s.rows())));
        }
    }
    let mut parts = vec![facial];
    parts.extend(deltas.as_ref());
    parts.extend(base.as_ref());
    parts.extend(secondary);
    Matrix::hcat(&parts)
}

/// Per-channel z-scoring statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Population statistics over every frame of the training windows.
    pub fn fit(train: &[&Matrix]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InsufficientData("no training windows for normalization".into()));
        }
        if train.len() < 2 {
            return Err(Error::InsufficientData("normalization needs at least 2 training windows".into()));
        }
        let c = train[0].cols();
        if train.iter().any(|m| m.cols() != c) {
            return Err(Error::Shape("training windows differ in channel count".into()));
        }
        let n: usize = train.iter().map(|m| m.rows()).sum();
        let mut mean = vec![0.0; c];
        for m in train {
            for r in 0..m.rows() {
                for (a, v) in mean.iter_mut().zip(m.row(r)) {
                    *a += v;
                }
            }
        }
        for a in mean.iter_mut() {
            *a /= n as f64;
        }
        let mut var = vec![0.0; c];
        for m in train {
            for r in 0..m.rows() {
                for ((a, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(NormalizationStats { mean, std })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!("normalizing {} channels with {}-channel stats", x.cols(), self.mean.len())));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

pub fn fit_normalization(train: &[&Matrix]) -> Result<NormalizationStats> {
    NormalizationStats::fit(train)
}

pub fn apply_normalization(stats: &NormalizationStats, windows: &[&Matrix]) -> Result<Vec<Matrix>> {
    windows.iter().map(|w| stats.apply(w)).collect()
}

/// Per-channel population mean followed by per-channel std.
pub fn summary_features(x: &Matrix) -> Vec<f64> {
    let mut means = Vec::with_capacity(x.cols());
    let mut stds = Vec::with_capacity(x.cols());
    for c in 0..x.cols() {
        let (m, s) = mean_std(&x.column(c));
        means.push(m);
        stds.push(s);
    }
    means.extend(stds);
    means
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::facial_channel_names;
    use proptest::prelude::*;

    fn seq(values: Matrix, names: Vec<String>, fs: f64) -> FeatureSequence {
        let n = values.rows();
        FeatureSequence::new(values, names, fs, vec![None; n]).unwrap()
    }

    fn facial(rows: usize, f: impl Fn(usize, usize) -> f64) -> FeatureSequence {
        let data = (0..rows * N_FACIAL).map(|i| f(i / N_FACIAL, i % N_FACIAL)).collect();
        seq(Matrix::new(rows, N_FACIAL, data).unwrap(), facial_channel_names(), 10.0)
    }

    fn gaze(x: &[f64], y: &[f64], fs: f64) -> FeatureSequence {
        let rows: Vec<Vec<f64>> = x.iter().zip(y).map(|(a, b)| vec![*a, *b]).collect();
        seq(Matrix::from_rows(&rows).unwrap(), vec!["gaze_x".into(), "gaze_y".into()], fs)
    }

    #[test]
    fn facial_derivative_examples() {
        let c = facial(5, |_, _| 3.0);
        assert!(facial_derivatives(&c).unwrap().values.data().iter().all(|&v| v == 0.0));
        let r = facial(3, |t, c| if c == 0 { [0.0, 1.0, 3.0][t] } else { 0.0 });
        let d = facial_derivatives(&r).unwrap();
        assert_eq!(d.values.column(0), vec![0.0, 1.0, 2.0]);
        assert_eq!(d.channel_names[0], "d_exp_00");
        let one = facial(1, |_, c| c as f64);
        let d = facial_derivatives(&one).unwrap();
        assert_eq!(d.values.rows(), 1);
        assert!(d.values.data().iter().all(|&v| v == 0.0));
        let narrow = seq(Matrix::zeros(3, 55), (0..55).map(|i| format!("c{i}")).collect(), 10.0);
        assert!(matches!(facial_derivatives(&narrow), Err(Error::Schema(_))));
    }

    #[test]
    fn gaze_dynamics_examples() {
        let g = gaze_dynamics(&gaze(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0], 10.0)).unwrap();
        assert_eq!(g.values.column(0), vec![0.0, 10.0, 10.0]);
        assert_eq!(g.values.column(2), vec![0.0, 10.0, 10.0]);
        let g = gaze_dynamics(&gaze(&[0.0, 0.3], &[0.0, 0.4], 10.0)).unwrap();
        assert!((g.values.get(1, 2) - 5.0).abs() < 1e-12);
        let s = gaze_dynamics(&gaze(&[2.0; 40], &[-1.0; 40], 10.0)).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 0.0));
        assert!(matches!(gaze_dynamics(&gaze(&[0.0], &[0.0], 10.0)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn gaze_dynamics_hand_trace_of_rolling_stats() {
        // fs = 2: 1 s window = 2 frames, 2 s = 4 frames, 3 s = 6 frames
        let x = [0.0, 1.0, 3.0, 6.0];
        let g = gaze_dynamics(&gaze(&x, &[0.0; 4], 2.0)).unwrap();
        let speed = g.values.column(2);
        assert_eq!(speed, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(g.values.column(3), vec![0.0, 0.0, 4.0, 4.0]);
        assert_eq!(g.values.column(6), vec![0.0, 1.0, 3.0, 5.0]);
        assert_eq!(g.values.column(7), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.values.column(8), vec![0.0, 1.0, 2.0, 3.0]);
        // dispersion over x prefix [0,1,3,6] at the last frame
        let (_, sx) = mean_std(&x);
        assert!((g.values.get(3, 10) - sx).abs() < 1e-12);
    }

    fn phased(labels: Vec<Option<PhaseLabel>>) -> FeatureSequence {
        let n = labels.len();
        FeatureSequence::new(Matrix::zeros(n, 1), vec!["c".into()], 10.0, labels).unwrap()
    }

    #[test]
    fn window_count_and_labels() {
        let s = phased(vec![Some(PhaseLabel::P1); 200]);
        let w = segment_windows(&s, "S", DriveCondition::MD, 9.0, 0.4).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].frames.rows(), 90);
        assert_eq!(w[1].start_frame, 90);

        let s = phased(vec![Some(PhaseLabel::P2); 90]);
        let w = segment_windows(&s, "S", DriveCondition::MD, 9.0, 0.4).unwrap();
        assert_eq!(w[0].stress_ratio, 1.0);
        assert_eq!(w[0].label, StressLabel::Stress);

        let mut l = vec![Some(PhaseLabel::P2); 36];
        l.extend(vec![Some(PhaseLabel::P3); 54]);
        let w = segment_windows(&phased(l), "S", DriveCondition::MD, 9.0, 0.4).unwrap();
        assert_eq!(w[0].stress_ratio, 0.4);
        assert_eq!(w[0].label, StressLabel::NoStress);
        assert_eq!(w[0].phase_mode, PhaseLabel::P3);
    }

    #[test]
    fn phase_mode_ties_and_unphased_frames() {
        let mut l = vec![Some(PhaseLabel::P3); 5];
        l.extend(vec![Some(PhaseLabel::P2); 5]);
        let (ratio, label, mode) = label_frames(&l, 0.4);
        assert_eq!((ratio, label, mode), (0.5, StressLabel::Stress, Some(PhaseLabel::P2)));
        let mut l = vec![None; 6];
        l.extend(vec![Some(PhaseLabel::P4); 4]);
        let (ratio, label, mode) = label_frames(&l, 0.4);
        assert_eq!((ratio, label, mode), (0.4, StressLabel::NoStress, Some(PhaseLabel::P4)));
    }

    #[test]
    fn tiny_window_is_config_error() {
        let s = phased(vec![Some(PhaseLabel::P1); 10]);
        assert!(matches!(segment_windows(&s, "S", DriveCondition::MD, 0.1, 0.4), Err(Error::Config(_))));
        assert!(matches!(segment_windows(&s, "S", DriveCondition::MD, -1.0, 0.4), Err(Error::Config(_))));
    }

    #[test]
    fn descriptor_examples() {
        let a = Matrix::new(3, 2, vec![0.0, 1.0, 2.0, 1.0, 4.0, 1.0]).unwrap();
        let b = Matrix::new(3, 2, vec![0.0, 5.0, 1.0, 5.0, 2.0, 5.0]).unwrap();
        assert_eq!(velocity_difference_descriptor(&a, &b).unwrap(), vec![1.0, 0.0]);
        assert_eq!(velocity_difference_descriptor(&a, &a).unwrap(), vec![0.0, 0.0]);
        let c1 = Matrix::new(3, 1, vec![2.0; 3]).unwrap();
        let c2 = Matrix::new(3, 1, vec![-7.0; 3]).unwrap();
        assert_eq!(velocity_difference_descriptor(&c1, &c2).unwrap(), vec![0.0]);
        let short = Matrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(velocity_difference_descriptor(&a, &short), Err(Error::Shape(_))));
    }

    fn win(phase: PhaseLabel, idx: usize, frames: Matrix) -> Window {
        Window {
            subject_id: "S".into(),
            condition: DriveCondition::MD,
            phase_mode: phase,
            window_index: idx,
            start_frame: 0,
            frames,
            label: StressLabel::NoStress,
            stress_ratio: 0.0,
            baseline_descriptor: None,
        }
    }

    #[test]
    fn baseline_pairing_and_fallbacks() {
        let ramp = |slope: f64| Matrix::new(3, 1, vec![0.0, slope, 2.0 * slope]).unwrap();
        let mut md = vec![
            win(PhaseLabel::P1, 0, ramp(2.0)),
            win(PhaseLabel::P1, 1, ramp(3.0)),
            win(PhaseLabel::P2, 2, ramp(1.0)),
        ];
        let nd = vec![win(PhaseLabel::P1, 0, ramp(1.0))];
        let warnings = attach_baselines(&mut md, &nd).unwrap();
        assert_eq!(md[0].baseline_descriptor, Some(vec![1.0]));
        // unmatched: falls back to the phase's mean ND difference (1.0)
        assert_eq!(md[1].baseline_descriptor, Some(vec![2.0]));
        assert_eq!(md[2].baseline_descriptor, Some(vec![0.0]));
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn model_input_widths() {
        let f = Matrix::zeros(90, 56);
        let base = vec![0.5; 56];
        let x = assemble_model_input(&f, true, Some(&base), None).unwrap();
        assert_eq!((x.rows(), x.cols()), (90, 168));
        assert_eq!(x.get(10, 112), 0.5);
        assert_eq!(assemble_model_input(&f, false, None, None).unwrap().cols(), 56);
        let bio = Matrix::zeros(90, 3);
        assert_eq!(assemble_model_input(&f, true, Some(&base), Some(&bio)).unwrap().cols(), 171);
        let short = Matrix::zeros(89, 3);
        assert!(matches!(assemble_model_input(&f, true, None, Some(&short)), Err(Error::Shape(_))));
    }

    #[test]
    fn normalization_examples() {
        let a = Matrix::new(1, 2, vec![5.0, -1.0]).unwrap();
        let b = Matrix::new(1, 2, vec![5.0, 1.0]).unwrap();
        let s = fit_normalization(&[&a, &b]).unwrap();
        assert_eq!(s.mean, vec![5.0, 0.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&a).unwrap().data(), &[0.0, -1.0]);
        assert!(matches!(fit_normalization(&[]), Err(Error::InsufficientData(_))));

        let c = Matrix::new(2, 1, vec![1.0, 3.0]).unwrap();
        let d = Matrix::new(2, 1, vec![5.0, 7.0]).unwrap();
        let s = fit_normalization(&[&c, &d]).unwrap();
        let once = s.apply(&c).unwrap();
        let twice = s.apply(&once).unwrap();
        assert_ne!(once, twice);
    }

    proptest! {
        #[test]
        fn normalized_train_set_is_standard(vals in proptest::collection::vec(-50.0f64..50.0, 12..60)) {
            let n = vals.len() / 3 * 3;
            let m1 = Matrix::new(n / 3, 3, vals[..n].to_vec()).unwrap();
            let m2 = Matrix::new(n / 3, 3, vals[..n].iter().map(|v| v * 0.5 + 1.0).collect()).unwrap();
            let s = fit_normalization(&[&m1, &m2]).unwrap();
            let z = apply_normalization(&s, &[&m1, &m2]).unwrap();
            for c in 0..3 {
                let col: Vec<f64> = z.iter().flat_map(|m| m.column(c)).collect();
                let (mu, sd) = mean_std(&col);
                prop_assert!(mu.abs() < 1e-6);
                if s.std[c] != 1.0 {
                    prop_assert!((sd - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn descriptor_is_antisymmetric(a in proptest::collection::vec(-5.0f64..5.0, 12), b in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let ma = Matrix::new(4, 3, a).unwrap();
            let mb = Matrix::new(4, 3, b).unwrap();
            let ab = velocity_difference_descriptor(&ma, &mb).unwrap();
            let ba = velocity_difference_descriptor(&mb, &ma).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn window_count_is_floor(n in 2usize..400, fs in 1.0f64..12.0) {
            let s = FeatureSequence::new(Matrix::zeros(n, 1), vec!["c".into()], fs, vec![Some(PhaseLabel::P1); n]).unwrap();
            if let Ok(t) = window_length(9.0, fs) {
                let w = segment_windows(&s, "S", DriveCondition::MD, 9.0, 0.4).unwrap();
                prop_assert_eq!(w.len(), n / t);
            }
        }

        #[test]
        fn raising_threshold_never_adds_stress(codes in proptest::collection::vec(0usize..6, 1..40), lo in 0.0f64..1.0, bump in 0.0f64..0.5) {
            let labels: Vec<Option<PhaseLabel>> = codes.iter().map(|&c| if c == 5 { None } else { Some(PhaseLabel::ALL[c]) }).collect();
            let (_, a, _) = label_frames(&labels, lo);
            let (_, b, _) = label_frames(&labels, lo + bump);
            prop_assert!(!(a == StressLabel::NoStress && b == StressLabel::Stress));
        }

        #[test]
        fn gaze_speed_translation_invariant(xs in proptest::collection::vec(-3.0f64..3.0, 2..30), dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
            let ys: Vec<f64> = xs.iter().map(|v| v * 0.7 - 1.0).collect();
            let a = gaze_dynamics(&gaze(&xs, &ys, 10.0)).unwrap();
            let xs2: Vec<f64> = xs.iter().map(|v| v + dx).collect();
            let ys2: Vec<f64> = ys.iter().map(|v| v + dy).collect();
            let b = gaze_dynamics(&gaze(&xs2, &ys2, 10.0)).unwrap();
            for (p, q) in a.values.column(2).iter().zip(b.values.column(2)) {
                prop_assert!((p - q).abs() < 1e-8);
            }
        }
    }
}
