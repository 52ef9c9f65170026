use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use super::{CliError, Command, EvalArgs, GenArgs, Mode, ScoreArgs, SplitArgs, SweepArgs, TrainArgs, TrainOptions};
use crate::bench::{self, BenchConfig};
use crate::corpus::{self, format_f64, LabeledVectorSet, SynthConfig, VectorFormat};
use crate::error::Error;
use crate::metrics::{self, DcfParams, EvalSummary};
use crate::plda::{self, PldaModel, TrainConfig, TrainingLog};
use crate::preprocess::{prepare_training, prepare_vectors};
use crate::scoring::{self, EnrollPooling, KernelMode, ScoreList};

type CmdResult = Result<(), CliError>;

pub(super) fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Gen(a) => gen(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Score(a) => score(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Sweep(a) => sweep(&a, out, err),
        Command::Split(a) => split(&a, out),
    }
}

fn load(path: &Path) -> Result<LabeledVectorSet, Error> {
    corpus::load_vectors(path, VectorFormat::from_path(path))
}

fn save(set: &LabeledVectorSet, path: &Path) -> Result<(), Error> {
    corpus::save_vectors(set, path, VectorFormat::from_path(path))
}

fn gen(a: &GenArgs, out: &mut dyn Write) -> CmdResult {
    if !(a.noise > 0.0) {
        return Err(CliError::Usage("--noise must be positive".into()));
    }
    let bench_outputs = [&a.enroll_out, &a.test_out, &a.trials_out];
    let bench_mode = a.clusters.is_some() || bench_outputs.iter().any(|p| p.is_some());
    if !bench_mode {
        let (set, model) = corpus::generate_synthetic(&SynthConfig {
            n_speakers: a.speakers,
            sessions_per_speaker: a.sessions,
            dim: a.dim,
            rank: a.rank,
            noise_scale: a.noise,
            seed: a.seed,
        })?;
        save(&set, &a.out)?;
        if let Some(p) = &a.model_out {
            plda::save_model(&model, None, p)?;
        }
        writeln!(out, "wrote {} vectors of {} speakers to {}", set.n_vectors(), set.n_speakers(), a.out.display()).ok();
        return Ok(());
    }

    let (Some(enroll_out), Some(test_out), Some(trials_out)) = (&a.enroll_out, &a.test_out, &a.trials_out) else {
        return Err(CliError::Usage(
            "benchmark generation needs --enroll-out, --test-out and --trials-out".into(),
        ));
    };
    let cfg = BenchConfig {
        n_speakers: a.speakers,
        n_clusters: a.clusters.unwrap_or(20),
        sessions: a.sessions,
        dim: a.dim,
        rank: a.rank,
        noise_scale: a.noise,
        cluster_spread: a.spread,
        eval_speakers: a.eval_speakers,
        enroll_sessions: a.enroll_sessions,
        test_sessions: a.test_sessions,
        progress_fraction: 0.4,
        seed: a.seed,
    };
    let data = bench::generate(&cfg)?;
    save(&data.train, &a.out)?;
    save(&data.enroll, enroll_out)?;
    save(&data.test, test_out)?;
    corpus::save_trials(&data.trials, trials_out)?;
    if let Some(p) = &a.model_out {
        let truth = PldaModel {
            mu: DVector::zeros(a.dim),
            f: data.speaker_space.clone(),
            sigma_w: nalgebra::DMatrix::identity(a.dim, a.dim) * (a.noise * a.noise),
            sigma_b: nalgebra::DMatrix::identity(a.dim, a.dim),
            alpha: None,
        };
        plda::save_model(&truth, None, p)?;
    }
    writeln!(
        out,
        "wrote {} training vectors, {} enrollment models and {} trials",
        data.train.n_vectors(),
        data.enroll.n_speakers(),
        data.trials.len()
    )
    .ok();
    Ok(())
}

fn train_config(o: &TrainOptions, rank_from_grid: bool) -> Result<TrainConfig, CliError> {
    let rank = match (o.rank, rank_from_grid) {
        (Some(r), _) => r,
        (None, true) => 1,
        (None, false) => return Err(CliError::Usage("--rank is required".into())),
    };
    if !(o.alpha > 0.0 && o.alpha.is_finite()) {
        return Err(CliError::Usage(format!("--alpha must be positive, got {}", o.alpha)));
    }
    Ok(TrainConfig {
        rank,
        alpha: o.alpha,
        iterations: o.iterations,
        selection: o.selection,
        seed: o.seed,
        variance_floor: o.variance_floor,
    })
}

fn train_prepared(set: &LabeledVectorSet, mode: Mode, cfg: &TrainConfig) -> Result<(PldaModel, TrainingLog), Error> {
    match mode {
        Mode::So => plda::train_so(set, cfg),
        Mode::Mo => plda::train_mo(set, cfg),
    }
}

fn write_log(log: &TrainingLog, path: &Path) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    let res = (|| {
        writeln!(w, "iteration,f,g,combined")?;
        for r in &log.iterations {
            writeln!(w, "{},{},{},{}", r.iteration, format_f64(r.f_value), opt(r.g_value), opt(r.combined))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = train_config(&a.train, false)?;
    let set = load(&a.vectors)?;
    let (prepared, lda) = prepare_training(&set, a.train.lda_dim)?;
    let (model, log) = train_prepared(&prepared, a.train.mode, &cfg)?;
    plda::save_model(&model, lda.as_ref(), &a.model_out)?;
    let log_path = a.log_out.clone().unwrap_or_else(|| {
        let mut p = a.model_out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    write_log(&log, &log_path)?;
    if let Some(last) = log.iterations.last() {
        writeln!(out, "iterations={} f={}", log.iterations.len(), format_f64(last.f_value)).ok();
    }
    Ok(())
}

fn pooled_speakers(set: &LabeledVectorSet) -> Result<Vec<(String, DVector<f64>)>, Error> {
    set.speakers()
        .iter()
        .map(|g| scoring::pool_enrollment(&g.vectors).map(|v| (g.speaker_id.clone(), v)))
        .collect()
}

fn score(a: &ScoreArgs, out: &mut dyn Write) -> CmdResult {
    if a.snorm_cohort.is_some() && a.cohort_size < 2 {
        return Err(CliError::Usage("--cohort-size must be at least 2".into()));
    }
    let (model, lda) = plda::load_model(&a.model)?;
    let enroll = prepare_vectors(&load(&a.enroll)?, lda.as_ref())?;
    let test = prepare_vectors(&load(&a.test)?, lda.as_ref())?;
    let trials = corpus::load_trials(&a.trials)?;
    let kernel = scoring::build_kernel(&model, a.kernel)?;
    let mut scores = scoring::score_trials(&kernel, &enroll, &test, &trials, a.pooling)?;

    if let Some(cohort_path) = &a.snorm_cohort {
        let cohort_set = prepare_vectors(&load(cohort_path)?, lda.as_ref())?;
        let cohort: Vec<DVector<f64>> = pooled_speakers(&cohort_set)?.into_iter().map(|(_, v)| v).collect();
        let model_probes = pooled_speakers(&enroll)?;
        let test_probes: Vec<(String, DVector<f64>)> = test
            .speakers()
            .iter()
            .flat_map(|g| g.segment_ids.iter().cloned().zip(g.vectors.iter().cloned()))
            .collect();
        let model_side = scoring::cohort_scores(&kernel, &model_probes, &cohort, a.cohort_size)?;
        let test_side = scoring::cohort_scores(&kernel, &test_probes, &cohort, a.cohort_size)?;
        scores = scoring::snorm(&scores, &model_side, &test_side)?;
    }
    scoring::save_scores(&scores, &a.out)?;
    writeln!(out, "scored {} trials", scores.entries.len()).ok();
    Ok(())
}

fn dcf_params(fa_weight: f64, miss_weight: f64) -> Result<DcfParams, CliError> {
    let p = DcfParams { fa_weight, miss_weight };
    p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(p)
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let params = dcf_params(a.fa_weight, a.miss_weight)?;
    let scores = scoring::load_scores(&a.scores)?;
    let trials = corpus::load_trials(&a.trials)?;
    let summary = EvalSummary::compute(&scores, &trials, &params)?;
    if let Some(p) = &a.det {
        metrics::save_det(&metrics::det_points(&scores, &trials)?, p)?;
    }
    write!(out, "{}", summary.render()).ok();
    Ok(())
}

/// Parsed `lo:hi:step` range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Range {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Usage(format!("range {s:?} must be lo:hi:step"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let r = Range { lo: v[0], hi: v[1], step: v[2] };
        if !(r.step > 0.0) || !r.lo.is_finite() || !r.hi.is_finite() {
            return Err(CliError::Usage(format!("range {s:?} needs a positive step and finite bounds")));
        }
        if r.hi < r.lo {
            return Err(CliError::Usage(format!("range {s:?} is empty")));
        }
        Ok(r)
    }

    /// Grid points `lo + i*step` up to `hi`, tolerant to rounding in
    /// `(hi - lo) / step`, and rounded to 10 decimals.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((self.lo + i as f64 * self.step) * 1e10).round() / 1e10)
            .collect()
    }
}

fn sweep(a: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let params = dcf_params(a.fa_weight, a.miss_weight)?;
    let (range, is_alpha) = match (&a.alpha_range, &a.rank_range) {
        (Some(r), None) => (Range::parse(r)?, true),
        (None, Some(r)) => (Range::parse(r)?, false),
        _ => return Err(CliError::Usage("exactly one of --alpha-range or --rank-range is required".into())),
    };
    if is_alpha && a.train.mode == Mode::So {
        return Err(CliError::Usage("--alpha-range requires --mode mo".into()));
    }
    let points = range.points();
    if !is_alpha && points.iter().any(|p| p.fract() != 0.0 || *p < 1.0) {
        return Err(CliError::Usage("--rank-range must contain positive integers".into()));
    }
    let base = train_config(&a.train, !is_alpha)?;
    let set = load(&a.vectors)?;
    let (prepared, lda) = prepare_training(&set, a.train.lda_dim)?;
    let configs: Vec<TrainConfig> = points
        .iter()
        .map(|&p| {
            let mut c = base.clone();
            if is_alpha {
                c.alpha = p;
            } else {
                c.rank = p as usize;
            }
            c.validate(prepared.dim()).map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    let enroll = prepare_vectors(&load(&a.enroll)?, lda.as_ref())?;
    let test = prepare_vectors(&load(&a.test)?, lda.as_ref())?;
    let trials = corpus::load_trials(&a.trials)?;

    // A grid point whose training fails numerically gets a `nan` row so the
    // remaining points are still reported.
    let mut rows = Vec::with_capacity(points.len());
    let mut last_failure = None;
    for (p, cfg) in points.iter().zip(&configs) {
        let param = if is_alpha { format!("{p}") } else { format!("{}", *p as usize) };
        let summary = match train_prepared(&prepared, a.train.mode, cfg) {
            Ok((model, _)) => Some(evaluate(&model, a.kernel, a.pooling, &enroll, &test, &trials, &params)?),
            Err(e @ Error::Numerical(_)) => {
                writeln!(err, "warning: param={param}: {e}").ok();
                last_failure = Some(e);
                None
            }
            Err(e) => return Err(e.into()),
        };
        match &summary {
            Some(s) => writeln!(out, "param={param} {}", s.record()).ok(),
            None => writeln!(out, "param={param} failed").ok(),
        };
        rows.push((param, summary));
    }
    if rows.iter().all(|(_, s)| s.is_none()) {
        return Err(last_failure.expect("at least one grid point").into());
    }
    write_sweep(&rows, &a.out)?;
    Ok(())
}

fn evaluate(
    model: &PldaModel,
    kernel: KernelMode,
    pooling: EnrollPooling,
    enroll: &LabeledVectorSet,
    test: &LabeledVectorSet,
    trials: &corpus::TrialList,
    params: &DcfParams,
) -> Result<EvalSummary, Error> {
    let k = scoring::build_kernel(model, kernel)?;
    let scores: ScoreList = scoring::score_trials(&k, enroll, test, trials, pooling)?;
    EvalSummary::compute(&scores, trials, params)
}

fn write_sweep(rows: &[(String, Option<EvalSummary>)], path: &Path) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        writeln!(w, "param,eer,min_dcf")?;
        for (p, s) in rows {
            match s {
                Some(s) => writeln!(w, "{p},{},{}", format_f64(s.eer), format_f64(s.min_dcf))?,
                None => writeln!(w, "{p},nan,nan")?,
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn split(a: &SplitArgs, out: &mut dyn Write) -> CmdResult {
    if !(a.fraction > 0.0 && a.fraction < 1.0) {
        return Err(CliError::Usage("--fraction must lie strictly between 0 and 1".into()));
    }
    let trials = corpus::load_trials(&a.trials)?;
    let (progress, evaluation) = trials.split(a.fraction, a.seed)?;
    corpus::save_trials(&progress, &a.progress_out)?;
    corpus::save_trials(&evaluation, &a.eval_out)?;
    writeln!(out, "progress={} evaluation={}", progress.len(), evaluation.len()).ok();
    Ok(())
}
