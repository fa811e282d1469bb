//! BPCER/MACER error rates, DET curves, D-EER and BPCER@MACER.
//!
//! Scores are oriented so that higher means more morph-like: a sample is
//! classified as a morph iff `score >= t`. Thresholds are only ever placed
//! at midpoints between adjacent distinct scores (plus `±∞`), so no sample
//! sits exactly on a threshold.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bona,
    Morph,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bona => "bona",
            Label::Morph => "morph",
        }
    }

    /// `-1` for bona fide, `+1` for morphs.
    pub fn sign(self) -> i8 {
        match self {
            Label::Bona => -1,
            Label::Morph => 1,
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bona" => Ok(Label::Bona),
            "morph" => Ok(Label::Morph),
            other => Err(Error::Schema(format!("unknown label {other:?}"))),
        }
    }
}

/// Scores split by ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub bona: Vec<f64>,
    pub morph: Vec<f64>,
}

impl LabeledScores {
    pub fn new(bona: Vec<f64>, morph: Vec<f64>) -> Self {
        Self { bona, morph }
    }

    pub fn push(&mut self, label: Label, score: f64) {
        match label {
            Label::Bona => self.bona.push(score),
            Label::Morph => self.morph.push(score),
        }
    }

    fn check(&self) -> Result<()> {
        if self.bona.is_empty() || self.morph.is_empty() {
            return Err(Error::Argument(format!(
                "metrics need both classes, got {} bona fide and {} morph scores",
                self.bona.len(),
                self.morph.len()
            )));
        }
        if self.bona.iter().chain(&self.morph).any(|v| !v.is_finite()) {
            return Err(Error::Data("scores must be finite".into()));
        }
        Ok(())
    }

    /// Coarsest error-rate increment: `max(1/|bona|, 1/|morph|)`.
    pub fn step(&self) -> f64 {
        (1.0 / self.bona.len() as f64).max(1.0 / self.morph.len() as f64)
    }
}

/// `(BPCER, MACER)` as fractions at threshold `t`.
pub fn error_rates(s: &LabeledScores, t: f64) -> Result<(f64, f64)> {
    s.check()?;
    if t.is_nan() {
        return Err(Error::Argument("threshold is NaN".into()));
    }
    let bpcer = s.bona.iter().filter(|&&v| v >= t).count() as f64 / s.bona.len() as f64;
    let macer = s.morph.iter().filter(|&&v| v < t).count() as f64 / s.morph.len() as f64;
    Ok((bpcer, macer))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub bpcer: f64,
    pub macer: f64,
}

/// Candidate thresholds: `-∞`, midpoints of adjacent distinct pooled
/// scores, `+∞`.
pub fn candidate_thresholds(s: &LabeledScores) -> Vec<f64> {
    let mut pooled: Vec<f64> = s.bona.iter().chain(&s.morph).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let mut out = Vec::with_capacity(pooled.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(pooled.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// Error rates at every candidate threshold, in increasing threshold order.
pub fn threshold_sweep(s: &LabeledScores) -> Result<Vec<OperatingPoint>> {
    s.check()?;
    let mut bona = s.bona.clone();
    let mut morph = s.morph.clone();
    bona.sort_by(f64::total_cmp);
    morph.sort_by(f64::total_cmp);
    let (nb, nm) = (bona.len() as f64, morph.len() as f64);
    // Both cursors only move forward as the threshold grows.
    let (mut bi, mut mi) = (0usize, 0usize);
    let mut out = Vec::new();
    for t in candidate_thresholds(s) {
        while bi < bona.len() && bona[bi] < t {
            bi += 1;
        }
        while mi < morph.len() && morph[mi] < t {
            mi += 1;
        }
        out.push(OperatingPoint {
            threshold: t,
            bpcer: (bona.len() - bi) as f64 / nb,
            macer: mi as f64 / nm,
        });
    }
    Ok(out)
}

/// Detection error trade-off staircase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    /// `(MACER, BPCER)` with MACER strictly increasing.
    pub points: Vec<(f64, f64)>,
}

impl DetCurve {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "macer,bpcer")?;
        for (m, b) in &self.points {
            writeln!(w, "{m},{b}")?;
        }
        Ok(())
    }
}

pub fn det_curve(s: &LabeledScores) -> Result<DetCurve> {
    let mut points: Vec<(f64, f64)> = Vec::new();
    for p in threshold_sweep(s)? {
        match points.last_mut() {
            // Same MACER at a higher threshold can only lower BPCER.
            Some(last) if last.0 == p.macer => last.1 = last.1.min(p.bpcer),
            _ => points.push((p.macer, p.bpcer)),
        }
    }
    Ok(DetCurve { points })
}

/// Detection equal error rate in percent.
///
/// `BPCER − MACER` is nonincreasing along the sweep; the crossing is found
/// and the two bracketing operating points are interpolated linearly.
pub fn d_eer(s: &LabeledScores) -> Result<f64> {
    let sweep = threshold_sweep(s)?;
    let diff = |p: &OperatingPoint| p.bpcer - p.macer;
    let k = sweep
        .iter()
        .position(|p| diff(p) <= 0.0)
        .ok_or_else(|| Error::Numeric("error rates never cross".into()))?;
    let hi = &sweep[k];
    if diff(hi) == 0.0 || k == 0 {
        return Ok(100.0 * hi.bpcer);
    }
    let lo = &sweep[k - 1];
    let (dl, dh) = (diff(lo), diff(hi));
    let lambda = dl / (dl - dh);
    Ok(100.0 * (lo.bpcer + lambda * (hi.bpcer - lo.bpcer)))
}

/// Lowest BPCER (percent) over thresholds whose MACER is at most
/// `target_percent`.
pub fn bpcer_at_macer(s: &LabeledScores, target_percent: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&target_percent) {
        return Err(Error::Argument(format!("MACER target {target_percent}% outside [0, 100]")));
    }
    let best = threshold_sweep(s)?
        .into_iter()
        .filter(|p| 100.0 * p.macer <= target_percent + 1e-9)
        .map(|p| p.bpcer)
        .fold(f64::INFINITY, f64::min);
    Ok(100.0 * best)
}

/// The three numbers reported per evaluation cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub d_eer: f64,
    pub bpcer_at_5: f64,
    pub bpcer_at_10: f64,
}

pub fn cell_metrics(s: &LabeledScores) -> Result<CellMetrics> {
    Ok(CellMetrics {
        d_eer: d_eer(s)?,
        bpcer_at_5: bpcer_at_macer(s, 5.0)?,
        bpcer_at_10: bpcer_at_macer(s, 10.0)?,
    })
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub label: Label,
    pub score: f64,
}

/// Writes `image_id,label,score` CSV.
pub fn write_scores_csv(records: &[ScoreRecord], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(|e| Error::Data(format!("score CSV: {e}")))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_scores_csv(r: impl Read) -> Result<Vec<ScoreRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        let rec: ScoreRecord = rec.map_err(|e| Error::Schema(format!("score CSV: {e}")))?;
        if !rec.score.is_finite() {
            return Err(Error::Data(format!("non-finite score for {}", rec.image_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn labeled_scores(records: &[ScoreRecord]) -> LabeledScores {
    let mut s = LabeledScores::default();
    for r in records {
        s.push(r.label, r.score);
    }
    s
}
