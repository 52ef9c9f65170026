//! Detection metrics. A trial is accepted iff its score is at or above the
//! threshold.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::{format_f64, TrialLabel, TrialList};
use crate::error::{Error, Result};
use crate::scoring::ScoreList;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub fa_weight: f64,
    pub miss_weight: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            fa_weight: 100.0,
            miss_weight: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fa_weight > 0.0 && self.miss_weight > 0.0 && self.fa_weight.is_finite() && self.miss_weight.is_finite()) {
            return Err(Error::InvalidConfig("DCF weights must be positive".into()));
        }
        Ok(())
    }
}

/// Splits scores into target and nontarget lists by joining on
/// `(model_id, segment_id)`.
pub fn split_by_label(scores: &ScoreList, trials: &TrialList) -> Result<(Vec<f64>, Vec<f64>)> {
    let by_key: HashMap<(&str, &str), f64> = scores
        .entries
        .iter()
        .map(|s| ((s.model_id.as_str(), s.segment_id.as_str()), s.score))
        .collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    let mut missing = Vec::new();
    for t in trials.entries() {
        let Some(&s) = by_key.get(&(t.model_id.as_str(), t.segment_id.as_str())) else {
            missing.push(format!("{}/{}", t.model_id, t.segment_id));
            continue;
        };
        match t.label {
            TrialLabel::Target => targets.push(s),
            TrialLabel::Nontarget => nontargets.push(s),
            TrialLabel::Unknown => {
                return Err(Error::InvalidData(format!(
                    "trial ({}, {}) has an unknown label",
                    t.model_id, t.segment_id
                )))
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    Ok((targets, nontargets))
}

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidData("scores contain NaN".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// DET points at every distinct score plus a final reject-all point at `+inf`.
///
/// `forced_misses` target trials are never accepted and contribute no
/// threshold.
pub fn det_curve_with_forced_misses(targets: &[f64], nontargets: &[f64], forced_misses: usize) -> Result<Vec<DetPoint>> {
    let n_tgt = targets.len() + forced_misses;
    if n_tgt == 0 {
        return Err(Error::InvalidData("no target trials".into()));
    }
    if nontargets.is_empty() {
        return Err(Error::InvalidData("no nontarget trials".into()));
    }
    let tgt = sorted(targets)?;
    let non = sorted(nontargets)?;
    let mut thresholds: Vec<f64> = tgt.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nt, nn) = (n_tgt as f64, non.len() as f64);
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    // i_t: targets strictly below threshold; i_n: nontargets strictly below
    let (mut i_t, mut i_n) = (0usize, 0usize);
    for &th in &thresholds {
        while i_t < tgt.len() && tgt[i_t] < th {
            i_t += 1;
        }
        while i_n < non.len() && non[i_n] < th {
            i_n += 1;
        }
        points.push(DetPoint {
            threshold: th,
            p_miss: (i_t + forced_misses) as f64 / nt,
            p_fa: (non.len() - i_n) as f64 / nn,
        });
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

pub fn det_curve(targets: &[f64], nontargets: &[f64]) -> Result<Vec<DetPoint>> {
    det_curve_with_forced_misses(targets, nontargets, 0)
}

pub fn det_points(scores: &ScoreList, trials: &TrialList) -> Result<Vec<DetPoint>> {
    let (t, n) = split_by_label(scores, trials)?;
    det_curve(&t, &n)
}

/// Equal error rate from DET points ordered by ascending threshold: the first
/// point with `p_miss == p_fa` if there is one, otherwise the linear
/// interpolation between the two points bracketing the crossing.
pub fn eer_from_det(points: &[DetPoint]) -> f64 {
    let mut prev: Option<&DetPoint> = None;
    for p in points {
        let d = p.p_miss - p.p_fa;
        if d >= 0.0 {
            return match prev {
                Some(q) if d > 0.0 => {
                    let d0 = q.p_miss - q.p_fa;
                    let t = -d0 / (d - d0);
                    q.p_miss + t * (p.p_miss - q.p_miss)
                }
                _ => p.p_miss,
            };
        }
        prev = Some(p);
    }
    // the reject-all end point always has p_miss = 1 >= p_fa = 0
    1.0
}

pub fn min_dcf_from_det(points: &[DetPoint], params: &DcfParams) -> f64 {
    points
        .iter()
        .map(|p| params.miss_weight * p.p_miss + params.fa_weight * p.p_fa)
        .fold(f64::INFINITY, f64::min)
}

pub fn eer(scores: &ScoreList, trials: &TrialList) -> Result<f64> {
    Ok(eer_from_det(&det_points(scores, trials)?))
}

/// Unnormalized minimum of `miss_weight * p_miss + fa_weight * p_fa`.
pub fn min_dcf(scores: &ScoreList, trials: &TrialList, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    Ok(min_dcf_from_det(&det_points(scores, trials)?, params))
}

fn check_matrix(score_matrix: &[Vec<f64>], is_blacklist: &[bool]) -> Result<()> {
    if score_matrix.is_empty() || score_matrix[0].is_empty() {
        return Err(Error::InvalidData("score matrix is empty".into()));
    }
    if score_matrix.len() != is_blacklist.len() {
        return Err(Error::InvalidData(format!(
            "{} matrix rows but {} labels",
            score_matrix.len(),
            is_blacklist.len()
        )));
    }
    let cols = score_matrix[0].len();
    if score_matrix.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidData("score matrix rows differ in length".into()));
    }
    if !is_blacklist.iter().any(|&b| b) || is_blacklist.iter().all(|&b| b) {
        return Err(Error::InvalidData("need at least one blacklist and one background trial".into()));
    }
    Ok(())
}

/// Maximum of a row and the first column attaining it.
fn row_max(row: &[f64]) -> (f64, usize) {
    let mut best = (row[0], 0);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, j);
        }
    }
    best
}

/// Multi-target detection EER on the per-trial maximum blacklist score.
pub fn top_s_eer(score_matrix: &[Vec<f64>], is_blacklist: &[bool]) -> Result<f64> {
    check_matrix(score_matrix, is_blacklist)?;
    let (mut t, mut n) = (Vec::new(), Vec::new());
    for (row, &bl) in score_matrix.iter().zip(is_blacklist) {
        let (m, _) = row_max(row);
        if bl {
            t.push(m);
        } else {
            n.push(m);
        }
    }
    Ok(eer_from_det(&det_curve(&t, &n)?))
}

/// As [`top_s_eer`], but a blacklist trial whose best column is not its true
/// speaker counts as a miss at every threshold.
pub fn top_1_eer(score_matrix: &[Vec<f64>], is_blacklist: &[bool], true_speaker: &[Option<usize>]) -> Result<f64> {
    check_matrix(score_matrix, is_blacklist)?;
    if true_speaker.len() != is_blacklist.len() {
        return Err(Error::InvalidData("true speaker list length differs from trial count".into()));
    }
    let (mut t, mut n, mut forced) = (Vec::new(), Vec::new(), 0usize);
    for (i, (row, &bl)) in score_matrix.iter().zip(is_blacklist).enumerate() {
        let (m, arg) = row_max(row);
        if bl {
            let truth = true_speaker[i].ok_or_else(|| Error::InvalidData(format!("blacklist trial {i} has no true speaker")))?;
            if truth == arg {
                t.push(m);
            } else {
                forced += 1;
            }
        } else {
            n.push(m);
        }
    }
    Ok(eer_from_det(&det_curve_with_forced_misses(&t, &n, forced)?))
}

fn format_threshold(t: f64) -> String {
    if t.is_infinite() {
        if t > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format_f64(t)
    }
}

pub fn write_det<W: Write>(points: &[DetPoint], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "threshold,p_miss,p_fa")?;
    for p in points {
        writeln!(w, "{},{},{}", format_threshold(p.threshold), format_f64(p.p_miss), format_f64(p.p_fa))?;
    }
    Ok(())
}

pub fn save_det(points: &[DetPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_det(points, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub eer: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl EvalSummary {
    pub fn compute(scores: &ScoreList, trials: &TrialList, params: &DcfParams) -> Result<Self> {
        params.validate()?;
        let (t, n) = split_by_label(scores, trials)?;
        let det = det_curve(&t, &n)?;
        Ok(Self {
            eer: eer_from_det(&det),
            min_dcf: min_dcf_from_det(&det, params),
            n_target: t.len(),
            n_nontarget: n.len(),
        })
    }

    /// `key=value` lines followed by the one-line record.
    pub fn render(&self) -> String {
        format!(
            "eer={:.6} eer_pct={:.4}\nmin_dcf={:.6}\nn_target={}\nn_nontarget={}\n{}\n",
            self.eer,
            self.eer * 100.0,
            self.min_dcf,
            self.n_target,
            self.n_nontarget,
            self.record()
        )
    }

    pub fn record(&self) -> String {
        format!("eer={};min_dcf={}", format_f64(self.eer), format_f64(self.min_dcf))
    }
}
