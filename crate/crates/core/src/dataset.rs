//! Sessions to labelled windows with per-modality frame matrices, and the
//! per-configuration model inputs built from them.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_model::{align_to_reference, DriveCondition, FeatureSequence, Modality, SessionRecording};
use crate::error::{Error, Result};
use crate::features::{assemble_model_input, attach_baselines, gaze_dynamics, segment_windows, summary_features, StressLabel, Window};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    pub window_s: f64,
    pub stress_threshold: f64,
    pub include_delta: bool,
    pub include_baseline: bool,
    /// Use the eleven gaze-dynamics channels instead of raw gaze coordinates.
    pub gaze_dynamics: bool,
    /// Add ND windows to the classification set, all labelled no_stress.
    pub include_nd_negatives: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            window_s: 9.0,
            stress_threshold: 0.4,
            include_delta: true,
            include_baseline: true,
            gaze_dynamics: true,
            include_nd_negatives: false,
        }
    }
}

/// One classification window with its bio and gaze frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// Facial frames, labels and keys.
    pub window: Window,
    pub bio: Matrix,
    pub gaze: Matrix,
}

impl SampleWindow {
    pub fn label(&self) -> f64 {
        self.window.label.as_f64()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub options: DatasetOptions,
    pub frames_per_window: usize,
    pub windows: Vec<SampleWindow>,
    pub warnings: Vec<String>,
}

struct SessionWindows {
    windows: Vec<Window>,
    bio: Vec<Matrix>,
    gaze: Vec<Matrix>,
}

fn session_windows(session: &SessionRecording, opts: &DatasetOptions) -> Result<SessionWindows> {
    let aligned = align_to_reference(session, Modality::Facial)?;
    let valid = aligned.joint_valid();
    let get = |m: Modality| -> Result<&FeatureSequence> {
        aligned
            .sequences
            .get(&m)
            .ok_or_else(|| Error::Schema(format!("session {} {} lacks a {m} stream", session.subject_id, session.condition)))
    };
    let mut facial = get(Modality::Facial)?.clone();
    facial.valid = valid;
    let bio = get(Modality::Bio)?;
    let gaze = if opts.gaze_dynamics { gaze_dynamics(get(Modality::Gaze)?)? } else { get(Modality::Gaze)?.clone() };
    let windows = segment_windows(&facial, &session.subject_id, session.condition, opts.window_s, opts.stress_threshold)?;
    let t = windows.first().map_or(0, |w| w.frames.rows());
    Ok(SessionWindows {
        bio: windows.iter().map(|w| bio.values.slice_rows(w.start_frame, t)).collect(),
        gaze: windows.iter().map(|w| gaze.values.slice_rows(w.start_frame, t)).collect(),
        windows,
    })
}

/// Windows every session, attaches MD-ND baseline descriptors and keeps the
/// MD windows (plus ND windows when configured). Subjects are visited in
/// sorted order.
pub fn build_windows(sessions: &[SessionRecording], opts: &DatasetOptions) -> Result<WindowSet> {
    let mut by_subject: BTreeMap<&str, BTreeMap<DriveCondition, &SessionRecording>> = BTreeMap::new();
    for s in sessions {
        if by_subject.entry(&s.subject_id).or_default().insert(s.condition, s).is_some() {
            return Err(Error::Manifest(format!("duplicate {} session for subject {}", s.condition, s.subject_id)));
        }
    }
    let mut windows = Vec::new();
    let mut warnings = Vec::new();
    for (subject, conds) in by_subject {
        let Some(md) = conds.get(&DriveCondition::MD) else {
            warnings.push(format!("subject {subject}: no MD session, skipped"));
            continue;
        };
        let mut mdw = session_windows(md, opts)?;
        let ndw = match conds.get(&DriveCondition::ND) {
            Some(nd) => Some(session_windows(nd, opts)?),
            None => {
                warnings.push(format!("subject {subject}: no ND session"));
                None
            }
        };
        if opts.include_baseline {
            let nd_list = ndw.as_ref().map(|n| n.windows.as_slice()).unwrap_or(&[]);
            warnings.extend(attach_baselines(&mut mdw.windows, nd_list)?);
        }
        for ((w, b), g) in mdw.windows.into_iter().zip(mdw.bio).zip(mdw.gaze) {
            windows.push(SampleWindow { window: w, bio: b, gaze: g });
        }
        if opts.include_nd_negatives {
            if let Some(nd) = ndw {
                for ((mut w, b), g) in nd.windows.into_iter().zip(nd.bio).zip(nd.gaze) {
                    w.label = StressLabel::NoStress;
                    if opts.include_baseline {
                        w.baseline_descriptor = Some(vec![0.0; w.frames.cols()]);
                    }
                    windows.push(SampleWindow { window: w, bio: b, gaze: g });
                }
            }
        }
    }
    let frames_per_window = windows.first().map_or(0, |w| w.window.frames.rows());
    Ok(WindowSet { options: opts.clone(), frames_per_window, windows, warnings })
}

impl WindowSet {
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.windows.iter().map(|w| w.window.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn labels(&self) -> Vec<f64> {
        self.windows.iter().map(SampleWindow::label).collect()
    }

    /// Key and summary table: one row per window with per-channel mean and
    /// std of the facial model input.
    pub fn write_table<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let Some(first) = self.windows.first() else {
            wtr.write_record(["subject", "condition", "phase_mode", "window_index", "label", "stress_ratio"])?;
            wtr.flush()?;
            return Ok(());
        };
        let width = self.facial_input(first)?.cols();
        let mut header: Vec<String> =
            ["subject", "condition", "phase_mode", "window_index", "label", "stress_ratio"].iter().map(|s| s.to_string()).collect();
        header.extend((0..width).map(|c| format!("mean_{c}")));
        header.extend((0..width).map(|c| format!("std_{c}")));
        wtr.write_record(&header)?;
        for s in &self.windows {
            let w = &s.window;
            let mut rec = vec![
                w.subject_id.clone(),
                w.condition.to_string(),
                w.phase_mode.to_string(),
                w.window_index.to_string(),
                w.label.as_str().to_string(),
                w.stress_ratio.to_string(),
            ];
            rec.extend(summary_features(&self.facial_input(s)?).iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    fn facial_input(&self, s: &SampleWindow) -> Result<Matrix> {
        let base = if self.options.include_baseline { s.window.baseline_descriptor.as_deref() } else { None };
        assemble_model_input(&s.window.frames, self.options.include_delta, base, None)
    }

    /// Model input streams of every window for one configuration.
    pub fn inputs(&self, kind: InputKind) -> Result<Vec<Vec<Matrix>>> {
        self.windows
            .iter()
            .map(|s| {
                let facial = || self.facial_input(s);
                let early = |sec: &Matrix| {
                    let base = if self.options.include_baseline { s.window.baseline_descriptor.as_deref() } else { None };
                    assemble_model_input(&s.window.frames, self.options.include_delta, base, Some(sec))
                };
                Ok(match kind {
                    InputKind::Facial => vec![facial()?],
                    InputKind::Bio => vec![s.bio.clone()],
                    InputKind::Gaze => vec![s.gaze.clone()],
                    InputKind::EarlyFacialBio => vec![early(&s.bio)?],
                    InputKind::EarlyFacialGaze => vec![early(&s.gaze)?],
                    InputKind::CrossFacialBio => vec![facial()?, s.bio.clone()],
                    InputKind::CrossFacialGaze => vec![facial()?, s.gaze.clone()],
                    InputKind::CrossGazeBio => vec![s.gaze.clone(), s.bio.clone()],
                    InputKind::FacialSummary => {
                        let v = summary_features(&facial()?);
                        vec![Matrix::new(1, v.len(), v)?]
                    }
                })
            })
            .collect()
    }
}

/// Which streams feed a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Facial,
    Bio,
    Gaze,
    EarlyFacialBio,
    EarlyFacialGaze,
    CrossFacialBio,
    CrossFacialGaze,
    CrossGazeBio,
    /// Per-window mean and std of the facial input, as one row.
    FacialSummary,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::PhaseLabel;
    use crate::synth::{benchmark_preset, generate};

    fn tiny() -> Vec<SessionRecording> {
        let mut cfg = benchmark_preset("separable_strong").unwrap();
        cfg.n_subjects = 2;
        generate(&cfg).unwrap().into_iter().flat_map(|p| [p.md, p.nd]).collect()
    }

    #[test]
    fn windows_and_input_widths() {
        let set = build_windows(&tiny(), &DatasetOptions::default()).unwrap();
        // 5 phases x 36 s at 5 Hz = 900 frames = 20 windows of 45 frames per MD session
        assert_eq!(set.frames_per_window, 45);
        assert_eq!(set.windows.len(), 40);
        assert_eq!(set.labels().iter().filter(|&&l| l == 1.0).count(), 16);
        assert!(set.warnings.is_empty());
        let widths = |k| set.inputs(k).unwrap()[0].iter().map(|m| (m.rows(), m.cols())).collect::<Vec<_>>();
        assert_eq!(widths(InputKind::Facial), vec![(45, 168)]);
        assert_eq!(widths(InputKind::Bio), vec![(45, 3)]);
        assert_eq!(widths(InputKind::Gaze), vec![(45, 11)]);
        assert_eq!(widths(InputKind::EarlyFacialBio), vec![(45, 171)]);
        assert_eq!(widths(InputKind::EarlyFacialGaze), vec![(45, 179)]);
        assert_eq!(widths(InputKind::CrossFacialBio), vec![(45, 168), (45, 3)]);
        assert_eq!(widths(InputKind::CrossGazeBio), vec![(45, 11), (45, 3)]);
        assert_eq!(widths(InputKind::FacialSummary), vec![(1, 336)]);
    }

    #[test]
    fn nd_negatives_switch() {
        let opts = DatasetOptions { include_nd_negatives: true, ..DatasetOptions::default() };
        let set = build_windows(&tiny(), &opts).unwrap();
        assert_eq!(set.windows.len(), 80);
        let nd: Vec<_> = set.windows.iter().filter(|w| w.window.condition == DriveCondition::ND).collect();
        assert_eq!(nd.len(), 40);
        assert!(nd.iter().all(|w| w.label() == 0.0));
        assert!(nd.iter().all(|w| w.window.phase_mode != PhaseLabel::P1 || w.window.stress_ratio == 0.0));
    }

    #[test]
    fn missing_nd_session_zero_baseline_with_warning() {
        let sessions: Vec<SessionRecording> = tiny().into_iter().filter(|s| s.condition == DriveCondition::MD).collect();
        let set = build_windows(&sessions, &DatasetOptions::default()).unwrap();
        assert!(!set.warnings.is_empty());
        assert!(set.windows.iter().all(|w| w.window.baseline_descriptor.as_ref().unwrap().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn table_export() {
        let set = build_windows(&tiny(), &DatasetOptions::default()).unwrap();
        let mut buf = Vec::new();
        set.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 41);
        assert!(text.starts_with("subject,condition,phase_mode,window_index,label,stress_ratio,mean_0,"));
    }
}
