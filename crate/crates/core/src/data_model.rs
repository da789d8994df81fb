//! Sessions, streams and phases: CSV/manifest ingestion, timestamp
//! cleaning and nearest-neighbor alignment onto a reference clock.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseLabel {
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl PhaseLabel {
    pub const ALL: [PhaseLabel; 5] = [PhaseLabel::P1, PhaseLabel::P2, PhaseLabel::P3, PhaseLabel::P4, PhaseLabel::P5];

    /// P2 and P4 carry the stressor task.
    pub fn is_stressor(self) -> bool {
        matches!(self, PhaseLabel::P2 | PhaseLabel::P4)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseLabel::P1 => "P1",
            PhaseLabel::P2 => "P2",
            PhaseLabel::P3 => "P3",
            PhaseLabel::P4 => "P4",
            PhaseLabel::P5 => "P5",
        }
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhaseLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PhaseLabel::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown phase label `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DriveCondition {
    ND,
    MD,
}

impl DriveCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            DriveCondition::ND => "ND",
            DriveCondition::MD => "MD",
        }
    }
}

impl fmt::Display for DriveCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DriveCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ND" => Ok(DriveCondition::ND),
            "MD" => Ok(DriveCondition::MD),
            _ => Err(Error::Manifest(format!("unknown drive condition `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Facial,
    Bio,
    Gaze,
}

pub const N_EXPRESSION: usize = 50;
pub const N_POSE: usize = 6;
pub const N_FACIAL: usize = N_EXPRESSION + N_POSE;
pub const BIO_CHANNELS: [&str; 3] = ["pp", "hr", "br"];
pub const GAZE_CHANNELS: [&str; 2] = ["gaze_x", "gaze_y"];

/// `exp_00..exp_49, pose_00..pose_05`
pub fn facial_channel_names() -> Vec<String> {
    (0..N_EXPRESSION)
        .map(|i| format!("exp_{i:02}"))
        .chain((0..N_POSE).map(|i| format!("pose_{i:02}")))
        .collect()
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Facial, Modality::Bio, Modality::Gaze];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Facial => "facial",
            Modality::Bio => "bio",
            Modality::Gaze => "gaze",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Modality::Facial => "facial.csv",
            Modality::Bio => "bio.csv",
            Modality::Gaze => "gaze.csv",
        }
    }

    pub fn channel_names(self) -> Vec<String> {
        match self {
            Modality::Facial => facial_channel_names(),
            Modality::Bio => BIO_CHANNELS.iter().map(|s| s.to_string()).collect(),
            Modality::Gaze => GAZE_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}`")))
    }
}

/// One cleaned per-modality table.
#[derive(Clone, Debug, PartialEq)]
pub struct RawStream {
    pub modality: Modality,
    pub timestamps: Vec<f64>,
    pub channel_names: Vec<String>,
    /// `timestamps.len() x channel_names.len()`
    pub values: Matrix,
    pub sample_rate_hz: f64,
}

impl RawStream {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Checks the stream invariants: strictly increasing timestamps, column
    /// lengths, the modality's channel layout, finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.channel_names != self.modality.channel_names() {
            return Err(Error::Schema(format!("{} stream has unexpected channel layout", self.modality)));
        }
        if self.values.rows() != self.timestamps.len() || self.values.cols() != self.channel_names.len() {
            return Err(Error::Shape(format!("{} stream columns do not match timestamps", self.modality)));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Manifest(format!("{} sample rate must be positive", self.modality)));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Schema(format!("{} timestamps are not strictly increasing", self.modality)));
        }
        if self.values.data().iter().chain(&self.timestamps).any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("{} stream holds non-finite values", self.modality)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseInterval {
    pub label: PhaseLabel,
    pub start_s: f64,
    pub end_s: f64,
}

/// Phase of time `t` under half-open `[start, end)` membership.
pub fn phase_at(intervals: &[PhaseInterval], t: f64) -> Option<PhaseLabel> {
    intervals.iter().find(|iv| t >= iv.start_s && t < iv.end_s).map(|iv| iv.label)
}

/// Per-modality cleaning counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningCounts {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped_duplicate: usize,
    pub dropped_decreasing: usize,
    pub dropped_non_finite: usize,
}

impl CleaningCounts {
    pub fn dropped(&self) -> usize {
        self.dropped_duplicate + self.dropped_decreasing + self.dropped_non_finite
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecording {
    pub subject_id: String,
    pub condition: DriveCondition,
    pub streams: BTreeMap<Modality, RawStream>,
    pub phase_intervals: Vec<PhaseInterval>,
    pub cleaning: BTreeMap<Modality, CleaningCounts>,
}

impl SessionRecording {
    pub fn stream(&self, m: Modality) -> Option<&RawStream> {
        self.streams.get(&m)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            subject_id: self.subject_id.clone(),
            condition: self.condition,
            sample_rate_hz: self.streams.iter().map(|(m, s)| (*m, s.sample_rate_hz)).collect(),
            phases: self.phase_intervals.clone(),
        }
    }
}

/// `manifest.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subject_id: String,
    pub condition: DriveCondition,
    pub sample_rate_hz: BTreeMap<Modality, f64>,
    pub phases: Vec<PhaseInterval>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    /// Sorted, validated phase intervals.
    pub fn checked_phases(&self) -> Result<Vec<PhaseInterval>> {
        if self.subject_id.trim().is_empty() {
            return Err(Error::Manifest("subject_id is empty".into()));
        }
        for (m, r) in &self.sample_rate_hz {
            if !(*r > 0.0 && r.is_finite()) {
                return Err(Error::Manifest(format!("{m} sample rate must be positive, got {r}")));
            }
        }
        let mut phases = self.phases.clone();
        for iv in &phases {
            if !(iv.start_s.is_finite() && iv.end_s.is_finite() && iv.start_s < iv.end_s) {
                return Err(Error::Manifest(format!("phase {} has an empty or invalid interval", iv.label)));
            }
        }
        phases.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for w in phases.windows(2) {
            if w[1].start_s < w[0].end_s {
                return Err(Error::Manifest(format!("phases {} and {} overlap", w[0].label, w[1].label)));
            }
        }
        Ok(phases)
    }
}

/// Parses and cleans one modality table.
///
/// Rows with a non-finite (or unparseable) field are dropped first; among the
/// remaining rows a timestamp equal to the last kept one is a duplicate and
/// one below it is decreasing, both dropped so the first occurrence wins.
pub fn read_stream<R: Read>(modality: Modality, reader: R, sample_rate_hz: f64) -> Result<(RawStream, CleaningCounts)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let channel_names = modality.channel_names();
    let column = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing required column `{name}`", modality.file_name())))
    };
    let ts_col = column("timestamp_s")?;
    let ch_cols = channel_names.iter().map(|n| column(n)).collect::<Result<Vec<_>>>()?;

    let mut counts = CleaningCounts::default();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut row = Vec::with_capacity(ch_cols.len());
    for rec in rdr.records() {
        let rec = rec?;
        counts.rows_read += 1;
        let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        let Some(t) = parse(ts_col) else {
            counts.dropped_non_finite += 1;
            continue;
        };
        row.clear();
        row.extend(ch_cols.iter().map(|&c| parse(c)));
        if row.iter().any(Option::is_none) {
            counts.dropped_non_finite += 1;
            continue;
        }
        if let Some(&last) = timestamps.last() {
            if t == last {
                counts.dropped_duplicate += 1;
                continue;
            }
            if t < last {
                counts.dropped_decreasing += 1;
                continue;
            }
        }
        timestamps.push(t);
        values.extend(row.iter().map(|v| v.unwrap()));
    }
    counts.rows_kept = timestamps.len();
    if timestamps.is_empty() {
        return Err(Error::EmptyStream(format!("{} stream is empty after cleaning", modality)));
    }
    let n = timestamps.len();
    let stream = RawStream {
        modality,
        timestamps,
        channel_names,
        values: Matrix::new(n, ch_cols.len(), values)?,
        sample_rate_hz,
    };
    Ok((stream, counts))
}

/// Locations of one session's files.
#[derive(Clone, Debug)]
pub struct SessionPaths {
    pub manifest: PathBuf,
    pub streams: BTreeMap<Modality, PathBuf>,
}

impl SessionPaths {
    /// Standard layout: `manifest.json` plus whichever of `facial.csv`,
    /// `bio.csv`, `gaze.csv` exist in `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let streams = Modality::ALL
            .into_iter()
            .map(|m| (m, dir.join(m.file_name())))
            .filter(|(_, p)| p.exists())
            .collect();
        SessionPaths { manifest: dir.join("manifest.json"), streams }
    }
}

pub fn ingest_session(paths: &SessionPaths) -> Result<SessionRecording> {
    let manifest = Manifest::load(&paths.manifest)?;
    let mut readers = BTreeMap::new();
    for (m, p) in &paths.streams {
        readers.insert(*m, std::fs::File::open(p)?);
    }
    ingest_from_readers(&manifest, readers)
}

/// Ingestion over arbitrary readers; every provided modality needs a
/// declared sample rate.
pub fn ingest_from_readers<R: Read>(manifest: &Manifest, readers: BTreeMap<Modality, R>) -> Result<SessionRecording> {
    let phase_intervals = manifest.checked_phases()?;
    let mut streams = BTreeMap::new();
    let mut cleaning = BTreeMap::new();
    for (m, r) in readers {
        let rate = *manifest
            .sample_rate_hz
            .get(&m)
            .ok_or_else(|| Error::Manifest(format!("no sample rate declared for {m}")))?;
        let (stream, counts) = read_stream(m, r, rate)?;
        streams.insert(m, stream);
        cleaning.insert(m, counts);
    }
    Ok(SessionRecording {
        subject_id: manifest.subject_id.clone(),
        condition: manifest.condition,
        streams,
        phase_intervals,
        cleaning,
    })
}

pub fn write_stream<W: Write>(stream: &RawStream, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp_s".to_string()];
    header.extend(stream.channel_names.iter().cloned());
    wtr.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for (i, t) in stream.timestamps.iter().enumerate() {
        rec.clear();
        rec.push(t.to_string());
        rec.extend(stream.values.row(i).iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `manifest.json` and one CSV per stream into `dir`.
pub fn write_session(dir: &Path, session: &SessionRecording) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in session.streams.values() {
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join(s.modality.file_name()))?);
        write_stream(s, f)?;
    }
    let json = serde_json::to_string_pretty(&session.manifest())?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Uniformly sampled multichannel series on one clock.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `T x C`
    pub values: Matrix,
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    pub phase_of_frame: Vec<Option<PhaseLabel>>,
    /// False for frames with no source sample within the alignment gap.
    /// Their values are zero-filled and they never enter windows.
    pub valid: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(values: Matrix, channel_names: Vec<String>, sample_rate_hz: f64, phase_of_frame: Vec<Option<PhaseLabel>>) -> Result<Self> {
        if values.cols() != channel_names.len() || values.rows() != phase_of_frame.len() {
            return Err(Error::Shape(format!(
                "sequence {}x{} with {} names and {} phase labels",
                values.rows(),
                values.cols(),
                channel_names.len(),
                phase_of_frame.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = channel_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Schema(format!("duplicate channel name `{dup}`")));
        }
        let valid = vec![true; values.rows()];
        Ok(FeatureSequence { values, channel_names, sample_rate_hz, phase_of_frame, valid })
    }

    /// A raw stream on its own clock.
    pub fn from_stream(stream: &RawStream, phases: &[PhaseInterval]) -> Self {
        let phase_of_frame = stream.timestamps.iter().map(|&t| phase_at(phases, t)).collect();
        FeatureSequence {
            values: stream.values.clone(),
            channel_names: stream.channel_names.clone(),
            sample_rate_hz: stream.sample_rate_hz,
            phase_of_frame,
            valid: vec![true; stream.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.values.cols()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// All modalities of one session on the reference clock.
#[derive(Clone, Debug)]
pub struct AlignedSession {
    pub subject_id: String,
    pub condition: DriveCondition,
    pub reference: Modality,
    pub timestamps: Vec<f64>,
    pub sequences: BTreeMap<Modality, FeatureSequence>,
}

impl AlignedSession {
    /// True where every aligned modality has a sample.
    pub fn joint_valid(&self) -> Vec<bool> {
        let mut v = vec![true; self.timestamps.len()];
        for s in self.sequences.values() {
            for (a, b) in v.iter_mut().zip(&s.valid) {
                *a &= *b;
            }
        }
        v
    }
}

/// Nearest-neighbor resampling of every stream onto the reference stream's
/// timestamps, with a maximum gap of one reference sample period.
pub fn align_to_reference(session: &SessionRecording, reference: Modality) -> Result<AlignedSession> {
    let ref_stream = session
        .stream(reference)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::EmptyStream(format!("reference stream {reference} is missing or empty")))?;
    let clock = &ref_stream.timestamps;
    let phase_of_frame: Vec<Option<PhaseLabel>> = clock.iter().map(|&t| phase_at(&session.phase_intervals, t)).collect();
    let max_gap = 1.0 / ref_stream.sample_rate_hz;
    let mut sequences = BTreeMap::new();
    for (m, stream) in &session.streams {
        let seq = if *m == reference {
            FeatureSequence::from_stream(stream, &session.phase_intervals)
        } else {
            let (values, valid) = resample_nearest(stream, clock, max_gap);
            FeatureSequence {
                values,
                channel_names: stream.channel_names.clone(),
                sample_rate_hz: ref_stream.sample_rate_hz,
                phase_of_frame: phase_of_frame.clone(),
                valid,
            }
        };
        sequences.insert(*m, seq);
    }
    Ok(AlignedSession {
        subject_id: session.subject_id.clone(),
        condition: session.condition,
        reference,
        timestamps: clock.clone(),
        sequences,
    })
}

// relative slack so that gaps equal to one period survive rounding
const GAP_SLACK: f64 = 1e-9;

fn resample_nearest(stream: &RawStream, clock: &[f64], max_gap: f64) -> (Matrix, Vec<bool>) {
    let c = stream.channel_names.len();
    let mut out = Matrix::zeros(clock.len(), c);
    let mut valid = vec![false; clock.len()];
    let ts = &stream.timestamps;
    let mut j = 0;
    for (i, &t) in clock.iter().enumerate() {
        // advance while the next sample is strictly closer
        while j + 1 < ts.len() && (ts[j + 1] - t).abs() < (ts[j] - t).abs() {
            j += 1;
        }
        if !ts.is_empty() && (ts[j] - t).abs() <= max_gap * (1.0 + GAP_SLACK) {
            out.row_mut(i).copy_from_slice(stream.values.row(j));
            valid[i] = true;
        }
    }
    (out, valid)
}
