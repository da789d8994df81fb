//! Phase-wise MD-ND paired analysis.
//!
//! For every subject, phase and channel the MD and ND signals are smoothed,
//! summarized by a mean level and a velocity summary (mean absolute
//! derivative), differenced across drives, and tested against zero with a
//! two-sided one-sample t-test across subjects.

pub mod smoothing;
pub mod special;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_model::{DriveCondition, FeatureSequence, Modality, PhaseLabel, SessionRecording, BIO_CHANNELS};
use crate::error::{Error, Result};
pub use smoothing::{smooth, SmoothingOperator};

/// Mean of absolute derivative values.
pub fn velocity_summary(derivative: &[f64]) -> Result<f64> {
    if derivative.is_empty() {
        return Err(Error::InsufficientData("velocity summary of an empty signal".into()));
    }
    Ok(derivative.iter().map(|d| d.abs()).sum::<f64>() / derivative.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided one-sample t-test of `diffs` against zero, using the sample
/// (n-1) standard deviation.
pub fn one_sample_ttest(diffs: &[f64]) -> Result<TTest> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("t-test needs n >= 2, got {n}")));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let ss: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum();
    let var = ss / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    let p = special::student_t_two_sided(t, df as f64);
    Ok(TTest { t, p, df })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    MeanLevel,
    Velocity,
}

impl SummaryKind {
    pub const ALL: [SummaryKind; 2] = [SummaryKind::MeanLevel, SummaryKind::Velocity];

    pub fn as_str(self) -> &'static str {
        match self {
            SummaryKind::MeanLevel => "mean_level",
            SummaryKind::Velocity => "velocity",
        }
    }
}

impl fmt::Display for SummaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SummaryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SummaryKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown summary kind `{s}`")))
    }
}

/// One (feature, phase, summary kind) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEffect {
    pub feature: String,
    pub phase: PhaseLabel,
    pub summary_kind: SummaryKind,
    pub smoothing: String,
    pub subjects: Vec<String>,
    pub diffs: Vec<f64>,
    pub n: usize,
    pub mean_diff: f64,
    /// `None` when the cell is invalid (n < 2 or zero variance).
    pub test: Option<TTest>,
}

impl PhaseEffect {
    pub fn p_value(&self) -> Option<f64> {
        self.test.map(|t| t.p)
    }
}

/// One subject's session on a uniform clock with phase labels.
#[derive(Clone, Debug)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub seq: FeatureSequence,
}

/// Phase summaries `(mean level, velocity)` of one channel.
fn phase_summaries(
    seq: &FeatureSequence,
    channel: usize,
    phase: PhaseLabel,
    op: &SmoothingOperator,
    lambda_cache: &mut BTreeMap<usize, f64>,
) -> Result<Option<(f64, f64)>> {
    let signal: Vec<f64> = (0..seq.len())
        .filter(|&t| seq.valid[t] && seq.phase_of_frame[t] == Some(phase))
        .map(|t| seq.values.get(t, channel))
        .collect();
    if signal.len() < 2 {
        return Ok(None);
    }
    let op = match *op {
        SmoothingOperator::Spline { lambda: None } if signal.len() >= 4 => {
            let l = *lambda_cache.entry(signal.len()).or_insert_with(|| smoothing::default_spline_lambda(signal.len()));
            SmoothingOperator::Spline { lambda: Some(l) }
        }
        SmoothingOperator::Spline { .. } if signal.len() < 4 => SmoothingOperator::None,
        other => other,
    };
    let (y, dy) = smooth(&signal, &op, seq.sample_rate_hz)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    Ok(Some((mean, velocity_summary(&dy)?)))
}

/// MD-ND paired effects for every channel shared by the sessions, every
/// phase and both summary kinds.
///
/// Biosignal channels (`pp`, `hr`, `br`) are summarized on raw signals; all
/// other channels use `op`. Subjects lacking either drive in a phase are
/// left out of that cell.
pub fn phase_effects(md: &[SubjectSeries], nd: &[SubjectSeries], op: &SmoothingOperator) -> Result<Vec<PhaseEffect>> {
    op.validate()?;
    let nd_by_subject: BTreeMap<&str, &SubjectSeries> = nd.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    let pairs: Vec<(&SubjectSeries, &SubjectSeries)> =
        md.iter().filter_map(|m| nd_by_subject.get(m.subject_id.as_str()).map(|n| (m, *n))).collect();
    let channels: Vec<String> = match md.first() {
        Some(first) => first.seq.channel_names.clone(),
        None => Vec::new(),
    };
    let mut lambda_cache = BTreeMap::new();
    let mut out = Vec::new();
    for name in &channels {
        let channel_op = if BIO_CHANNELS.contains(&name.as_str()) { SmoothingOperator::None } else { *op };
        for phase in PhaseLabel::ALL {
            let mut subjects = Vec::new();
            let mut level = Vec::new();
            let mut velocity = Vec::new();
            for (m, n) in &pairs {
                let (Some(cm), Some(cn)) = (m.seq.channel_index(name), n.seq.channel_index(name)) else { continue };
                let sm = phase_summaries(&m.seq, cm, phase, &channel_op, &mut lambda_cache)?;
                let sn = phase_summaries(&n.seq, cn, phase, &channel_op, &mut lambda_cache)?;
                if let (Some((mu_m, nu_m)), Some((mu_n, nu_n))) = (sm, sn) {
                    subjects.push(m.subject_id.clone());
                    level.push(mu_m - mu_n);
                    velocity.push(nu_m - nu_n);
                }
            }
            for (kind, diffs) in [(SummaryKind::MeanLevel, level), (SummaryKind::Velocity, velocity)] {
                let n = diffs.len();
                let mean_diff = if n > 0 { diffs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
                let test = one_sample_ttest(&diffs).ok();
                out.push(PhaseEffect {
                    feature: name.clone(),
                    phase,
                    summary_kind: kind,
                    smoothing: op.label(),
                    subjects: subjects.clone(),
                    diffs,
                    n,
                    mean_diff,
                    test,
                });
            }
        }
    }
    Ok(out)
}

/// MD and ND series of one modality, each stream on its own clock.
pub fn modality_series(sessions: &[SessionRecording], modality: Modality) -> (Vec<SubjectSeries>, Vec<SubjectSeries>) {
    let (mut md, mut nd) = (Vec::new(), Vec::new());
    for s in sessions {
        let Some(stream) = s.stream(modality).filter(|st| !st.is_empty()) else { continue };
        let series = SubjectSeries { subject_id: s.subject_id.clone(), seq: FeatureSequence::from_stream(stream, &s.phase_intervals) };
        match s.condition {
            DriveCondition::MD => md.push(series),
            DriveCondition::ND => nd.push(series),
        }
    }
    (md, nd)
}

/// [`phase_effects`] over every listed modality of a session collection.
pub fn session_effects(sessions: &[SessionRecording], modalities: &[Modality], op: &SmoothingOperator) -> Result<Vec<PhaseEffect>> {
    let mut out = Vec::new();
    for &m in modalities {
        let (md, nd) = modality_series(sessions, m);
        out.extend(phase_effects(&md, &nd, op)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub enum Category {
    /// Not significant at any threshold.
    Ns,
    /// Significant at the given threshold (the strictest one passed).
    Below(f64),
    Invalid,
}

impl Category {
    pub fn label(&self) -> String {
        match self {
            Category::Ns => "ns".into(),
            Category::Below(t) => format!("p<{t}"),
            Category::Invalid => "invalid".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ns" => Ok(Category::Ns),
            "invalid" => Ok(Category::Invalid),
            _ => s
                .strip_prefix("p<")
                .and_then(|v| v.parse().ok())
                .map(Category::Below)
                .ok_or_else(|| Error::Schema(format!("unknown category `{s}`"))),
        }
    }
}

pub fn categorize(p: Option<f64>, thresholds: &[f64]) -> Category {
    let Some(p) = p else { return Category::Invalid };
    let mut best = None;
    for &t in thresholds {
        if p < t && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    }
    best.map_or(Category::Ns, Category::Below)
}

/// Row of the significance grid and of `stats_report.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceCell {
    pub feature: String,
    pub phase: PhaseLabel,
    pub summary_kind: SummaryKind,
    pub smoothing: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub category: Category,
}

/// Features significant in both P2 and P4 at a threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressorCount {
    pub summary_kind: SummaryKind,
    pub threshold: f64,
    pub features: Vec<String>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceMap {
    pub thresholds: Vec<f64>,
    pub cells: Vec<SignificanceCell>,
    pub both_stressor_counts: Vec<StressorCount>,
}

impl SignificanceMap {
    pub fn cell(&self, feature: &str, phase: PhaseLabel, kind: SummaryKind) -> Option<&SignificanceCell> {
        self.cells.iter().find(|c| c.feature == feature && c.phase == phase && c.summary_kind == kind)
    }

    pub fn both_stressor(&self, kind: SummaryKind, threshold: f64) -> Option<&StressorCount> {
        self.both_stressor_counts.iter().find(|c| c.summary_kind == kind && c.threshold == threshold)
    }

    /// Human-readable count lines.
    pub fn summary_lines(&self) -> Vec<String> {
        self.both_stressor_counts
            .iter()
            .map(|c| format!("{} features significant in both P2 and P4 ({}, p<{})", c.count, c.summary_kind, c.threshold))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["feature", "phase", "summary_kind", "smoothing", "n", "mean_diff", "t", "p", "category"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            wtr.write_record([
                c.feature.clone(),
                c.phase.to_string(),
                c.summary_kind.to_string(),
                c.smoothing.clone(),
                c.n.to_string(),
                c.mean_diff.to_string(),
                opt(c.t),
                opt(c.p),
                c.category.label(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads `stats_report.csv` back and recomputes the stressor counts.
    pub fn read_csv<R: Read>(r: R, thresholds: &[f64]) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Schema(format!("stats report row missing column {i}")));
            let num = |i: usize| -> Result<f64> {
                field(i)?.parse().map_err(|_| Error::Schema(format!("bad number in column {i}")))
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                let s = field(i)?;
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| Error::Schema(format!("bad number in column {i}")))
                }
            };
            cells.push(SignificanceCell {
                feature: field(0)?.to_string(),
                phase: field(1)?.parse().map_err(|_| Error::Schema("bad phase".into()))?,
                summary_kind: field(2)?.parse()?,
                smoothing: field(3)?.to_string(),
                n: field(4)?.parse().map_err(|_| Error::Schema("bad n".into()))?,
                mean_diff: num(5)?,
                t: opt(6)?,
                p: opt(7)?,
                category: Category::parse(field(8)?)?,
            });
        }
        let both_stressor_counts = stressor_counts(&cells, thresholds);
        Ok(SignificanceMap { thresholds: thresholds.to_vec(), cells, both_stressor_counts })
    }
}

fn stressor_counts(cells: &[SignificanceCell], thresholds: &[f64]) -> Vec<StressorCount> {
    let mut out = Vec::new();
    for kind in SummaryKind::ALL {
        for &thr in thresholds {
            let passes = |phase: PhaseLabel| -> Vec<&str> {
                cells
                    .iter()
                    .filter(|c| c.summary_kind == kind && c.phase == phase && c.p.is_some_and(|p| p < thr))
                    .map(|c| c.feature.as_str())
                    .collect()
            };
            let p4 = passes(PhaseLabel::P4);
            let mut features: Vec<String> =
                passes(PhaseLabel::P2).into_iter().filter(|f| p4.contains(f)).map(str::to_string).collect();
            features.dedup();
            out.push(StressorCount { summary_kind: kind, threshold: thr, count: features.len(), features });
        }
    }
    out
}

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.05, 0.001];

pub fn significance_map(effects: &[PhaseEffect], thresholds: &[f64]) -> SignificanceMap {
    let cells: Vec<SignificanceCell> = effects
        .iter()
        .map(|e| SignificanceCell {
            feature: e.feature.clone(),
            phase: e.phase,
            summary_kind: e.summary_kind,
            smoothing: e.smoothing.clone(),
            n: e.n,
            mean_diff: e.mean_diff,
            t: e.test.map(|t| t.t),
            p: e.test.map(|t| t.p),
            category: categorize(e.p_value(), thresholds),
        })
        .collect();
    let both_stressor_counts = stressor_counts(&cells, thresholds);
    SignificanceMap { thresholds: thresholds.to_vec(), cells, both_stressor_counts }
}

/// Kolmogorov-Smirnov statistic of a sample against U(0, 1).
pub fn ks_uniform(sample: &[f64]) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xa.len() && j < xb.len() {
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic KS critical coefficient `sqrt(-ln(alpha/2) / 2)`.
pub fn ks_critical_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}
