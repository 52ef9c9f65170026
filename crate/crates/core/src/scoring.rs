//! Two-covariance verification scoring and symmetric score normalization.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::corpus::{format_f64, LabeledVectorSet, TrialList};
use crate::error::{Error, Result};
use crate::linalg;
use crate::plda::PldaModel;
use crate::preprocess::length_normalize;

/// Which total covariance enters the `Q` term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    /// `FF' + Sb`.
    #[default]
    BetweenQ,
    /// `FF' + Sw`, the classical two-covariance kernel.
    WithinQ,
}

impl FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "between" | "between_q" => Ok(KernelMode::BetweenQ),
            "within" | "within_q" => Ok(KernelMode::WithinQ),
            other => Err(Error::InvalidConfig(format!("unknown kernel mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnrollPooling {
    /// Average the enrollment vectors, then length-normalize.
    #[default]
    MeanRenorm,
    /// Average the pairwise scores of the enrollment vectors.
    ScoreAverage,
}

impl FromStr for EnrollPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean_renorm" => Ok(EnrollPooling::MeanRenorm),
            "avg-score" | "score_average" => Ok(EnrollPooling::ScoreAverage),
            other => Err(Error::InvalidConfig(format!("unknown pooling mode {other:?}"))),
        }
    }
}

impl fmt::Display for KernelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelMode::BetweenQ => "between",
            KernelMode::WithinQ => "within",
        })
    }
}

impl fmt::Display for EnrollPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnrollPooling::MeanRenorm => "mean",
            EnrollPooling::ScoreAverage => "avg-score",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringKernel {
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub mode: KernelMode,
}

/// Precomputes `Q` and `P` for the quadratic two-covariance score.
///
/// With `T = FF' + Sw`, `A = FF'` and `M = T - A T^-1 A`:
/// `P = T^-1 A M^-1` and `Q = Tx^-1 - M^-1`, where `Tx = FF' + Sb` in
/// [`KernelMode::BetweenQ`] and `Tx = T` in [`KernelMode::WithinQ`].
pub fn build_kernel(model: &PldaModel, mode: KernelMode) -> Result<ScoringKernel> {
    model.validate()?;
    let ac = &model.f * model.f.transpose();
    let tot_w = &ac + &model.sigma_w;
    let tot_w_inv = linalg::spd_inverse(&tot_w, "within total covariance FF'+Sw")?;
    let m = &tot_w - &ac * &tot_w_inv * &ac;
    let m_inv = linalg::spd_inverse(&m, "conditional covariance FF'+Sw - FF'(FF'+Sw)^-1 FF'")?;
    let tot_x_inv = match mode {
        KernelMode::WithinQ => tot_w_inv.clone(),
        KernelMode::BetweenQ => {
            let tot_b = &ac + &model.sigma_b;
            linalg::spd_inverse(&tot_b, "between total covariance FF'+Sb")?
        }
    };
    let q = linalg::symmetrize(&(tot_x_inv - &m_inv));
    let p = linalg::symmetrize(&(&tot_w_inv * &ac * &m_inv));
    Ok(ScoringKernel {
        q,
        p,
        mu: model.mu.clone(),
        mode,
    })
}

impl ScoringKernel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `x1'Q x1 + x2'Q x2 + 2 x1'P x2` on mean-removed inputs, constant omitted.
    pub fn score_pair(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<f64> {
        for x in [x1, x2] {
            if x.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    actual: x.len(),
                });
            }
        }
        let a = x1 - &self.mu;
        let b = x2 - &self.mu;
        // both cross terms are summed so that swapping the inputs is exact
        Ok(self.q.dot_quad(&a) + self.q.dot_quad(&b) + (a.dot(&(&self.p * &b)) + b.dot(&(&self.p * &a))))
    }
}

trait QuadForm {
    fn dot_quad(&self, x: &DVector<f64>) -> f64;
}

impl QuadForm for DMatrix<f64> {
    fn dot_quad(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(self * x))
    }
}

pub fn score_pair(k: &ScoringKernel, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<f64> {
    k.score_pair(x1, x2)
}

/// Mean of the enrollment vectors, length-normalized.
pub fn pool_enrollment(vectors: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = vectors.first().ok_or_else(|| Error::InvalidData("no enrollment vectors".into()))?;
    let mut sum = DVector::zeros(first.len());
    for v in vectors {
        sum += v;
    }
    length_normalize(&(sum / vectors.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub model_id: String,
    pub segment_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreList {
    pub entries: Vec<Score>,
}

impl ScoreList {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|s| s.score).collect()
    }
}

/// Scores every trial; output order follows `trials`.
pub fn score_trials(
    k: &ScoringKernel,
    models: &LabeledVectorSet,
    tests: &LabeledVectorSet,
    trials: &TrialList,
    pooling: EnrollPooling,
) -> Result<ScoreList> {
    let model_index: HashMap<&str, usize> =
        models.speakers().iter().enumerate().map(|(i, g)| (g.speaker_id.as_str(), i)).collect();
    let seg_index = tests.segment_index();

    let mut missing = Vec::new();
    for t in trials.entries() {
        if !model_index.contains_key(t.model_id.as_str()) && !missing.contains(&t.model_id) {
            missing.push(t.model_id.clone());
        }
        if !seg_index.contains_key(t.segment_id.as_str()) && !missing.contains(&t.segment_id) {
            missing.push(t.segment_id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }

    let pooled: Vec<Option<DVector<f64>>> = match pooling {
        EnrollPooling::MeanRenorm => models
            .speakers()
            .iter()
            .map(|g| pool_enrollment(&g.vectors).map(Some))
            .collect::<Result<_>>()?,
        EnrollPooling::ScoreAverage => vec![None; models.n_speakers()],
    };

    let mut entries = Vec::with_capacity(trials.len());
    for t in trials.entries() {
        let m = model_index[t.model_id.as_str()];
        let (s, i) = seg_index[t.segment_id.as_str()];
        let test = &tests.speakers()[s].vectors[i];
        let score = match &pooled[m] {
            Some(enroll) => k.score_pair(enroll, test)?,
            None => {
                let vs = &models.speakers()[m].vectors;
                let mut acc = 0.0;
                for v in vs {
                    acc += k.score_pair(v, test)?;
                }
                acc / vs.len() as f64
            }
        };
        entries.push(Score {
            model_id: t.model_id.clone(),
            segment_id: t.segment_id.clone(),
            score,
        });
    }
    Ok(ScoreList { entries })
}

/// Scores each `(id, vector)` against every cohort vector and keeps the
/// `top_n` highest scores (ties broken by cohort order).
pub fn cohort_scores(
    k: &ScoringKernel,
    probes: &[(String, DVector<f64>)],
    cohort: &[DVector<f64>],
    top_n: usize,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::with_capacity(probes.len());
    for (id, probe) in probes {
        let mut scored: Vec<(f64, usize)> = cohort
            .iter()
            .enumerate()
            .map(|(c, v)| k.score_pair(probe, v).map(|s| (s, c)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(top_n);
        out.insert(id.clone(), scored.into_iter().map(|(s, _)| s).collect());
    }
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cohort_stats<'a>(
    cache: &mut HashMap<&'a str, (f64, f64)>,
    cohort: &HashMap<String, Vec<f64>>,
    id: &'a str,
    side: &str,
) -> Result<(f64, f64)> {
    if let Some(&st) = cache.get(id) {
        return Ok(st);
    }
    let list = cohort
        .get(id)
        .ok_or_else(|| Error::InvalidData(format!("no cohort scores for {side} {id}")))?;
    if list.len() < 2 {
        return Err(Error::InvalidData(format!(
            "{side} {id} has {} cohort scores, need at least 2",
            list.len()
        )));
    }
    let (m, s) = mean_std(list);
    if !(s > 0.0) {
        return Err(Error::InvalidData(format!("cohort scores of {side} {id} have zero variance")));
    }
    cache.insert(id, (m, s));
    Ok((m, s))
}

/// Symmetric normalization `0.5 * ((s - m1)/s1 + (s - m2)/s2)` with model-side
/// and segment-side cohort statistics.
pub fn snorm(
    raw: &ScoreList,
    cohort_model_scores: &HashMap<String, Vec<f64>>,
    cohort_test_scores: &HashMap<String, Vec<f64>>,
) -> Result<ScoreList> {
    let mut model_cache = HashMap::new();
    let mut test_cache = HashMap::new();
    let mut entries = Vec::with_capacity(raw.entries.len());
    for e in &raw.entries {
        let (m1, s1) = cohort_stats(&mut model_cache, cohort_model_scores, &e.model_id, "model")?;
        let (m2, s2) = cohort_stats(&mut test_cache, cohort_test_scores, &e.segment_id, "segment")?;
        entries.push(Score {
            model_id: e.model_id.clone(),
            segment_id: e.segment_id.clone(),
            score: 0.5 * ((e.score - m1) / s1 + (e.score - m2) / s2),
        });
    }
    Ok(ScoreList { entries })
}

pub fn save_scores(scores: &ScoreList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_scores(scores, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_scores<W: Write>(scores: &ScoreList, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "model_id,segment_id,score")?;
    for s in &scores.entries {
        writeln!(w, "{},{},{}", s.model_id, s.segment_id, format_f64(s.score))?;
    }
    Ok(())
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreList> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(file)
}

pub fn read_scores<R: std::io::Read>(reader: R) -> Result<ScoreList> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut entries = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::parse(e.position().map(|p| p.line() as usize).unwrap_or(0), e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if i == 0 && record.get(0) == Some("model_id") {
            continue;
        }
        if record.len() != 3 {
            return Err(Error::parse(line, "expected model_id,segment_id,score"));
        }
        let score: f64 = record[2]
            .parse()
            .map_err(|_| Error::parse(line, format!("malformed score {:?}", &record[2])))?;
        entries.push(Score {
            model_id: record[0].to_string(),
            segment_id: record[1].to_string(),
            score,
        });
    }
    Ok(ScoreList { entries })
}
