//! Synthetic verification benchmark with clusters of confusable speakers.
//!
//! Speaker factors are drawn around a small number of cluster centers, so
//! speakers of the same cluster are hard to tell apart. Training speakers and
//! evaluation speakers are disjoint but share the speaker space, the cluster
//! centers and the noise level. Evaluation trials pair every enrollment model
//! with every test segment and are split into a progress part and an
//! evaluation part.

use nalgebra::DMatrix;

use crate::corpus::{draw_matrix, normal_vector, seeded_rng, segment_name, speaker_name, LabeledVectorSet, Rng, SpeakerGroup, Trial, TrialLabel, TrialList};
use crate::error::{Error, Result};
use crate::metrics::{DcfParams, EvalSummary};
use crate::plda::{train_mo, train_so, PldaModel, TrainConfig, TrainingLog};
use crate::preprocess::{prepare_training, prepare_vectors, LdaTransform};
use crate::scoring::{build_kernel, score_trials, EnrollPooling, KernelMode, ScoreList};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_speakers: usize,
    pub n_clusters: usize,
    pub sessions: usize,
    pub dim: usize,
    pub rank: usize,
    pub noise_scale: f64,
    /// Standard deviation of speaker factors around their cluster center.
    pub cluster_spread: f64,
    pub eval_speakers: usize,
    pub enroll_sessions: usize,
    pub test_sessions: usize,
    /// Fraction of trials in the progress subset.
    pub progress_fraction: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_speakers: 200,
            n_clusters: 20,
            sessions: 5,
            dim: 50,
            rank: 10,
            noise_scale: 1.0,
            cluster_spread: 0.3,
            eval_speakers: 100,
            enroll_sessions: 5,
            test_sessions: 3,
            progress_fraction: 0.4,
            seed: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_speakers,
            self.n_clusters,
            self.sessions,
            self.dim,
            self.rank,
            self.eval_speakers,
            self.enroll_sessions,
            self.test_sessions,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidConfig("benchmark sizes must be positive".into()));
        }
        if self.rank > self.dim {
            return Err(Error::InvalidConfig("rank exceeds dim".into()));
        }
        if self.eval_speakers < 2 {
            return Err(Error::InvalidConfig("need at least 2 evaluation speakers".into()));
        }
        if !(self.noise_scale > 0.0 && self.cluster_spread >= 0.0) {
            return Err(Error::InvalidConfig("noise_scale must be positive and cluster_spread non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchData {
    pub train: LabeledVectorSet,
    pub enroll: LabeledVectorSet,
    pub test: LabeledVectorSet,
    pub trials: TrialList,
    pub progress: TrialList,
    pub evaluation: TrialList,
    pub speaker_space: DMatrix<f64>,
}

struct World {
    f: DMatrix<f64>,
    centers: Vec<nalgebra::DVector<f64>>,
    noise: f64,
    spread: f64,
}

impl World {
    fn speaker(&self, rng: &mut Rng, cluster: usize, id: &str, first_session: usize, sessions: usize) -> SpeakerGroup {
        let h = &self.centers[cluster] + normal_vector(rng, self.f.ncols()) * self.spread;
        let center = &self.f * h;
        let mut g = SpeakerGroup {
            speaker_id: id.to_string(),
            segment_ids: Vec::with_capacity(sessions),
            vectors: Vec::with_capacity(sessions),
        };
        for i in 0..sessions {
            g.segment_ids.push(segment_name(id, first_session + i));
            g.vectors.push(&center + normal_vector(rng, self.f.nrows()) * self.noise);
        }
        g
    }
}

pub fn generate(cfg: &BenchConfig) -> Result<BenchData> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let world = World {
        f: draw_matrix(&mut rng, cfg.dim, cfg.rank),
        centers: (0..cfg.n_clusters).map(|_| normal_vector(&mut rng, cfg.rank)).collect(),
        noise: cfg.noise_scale,
        spread: cfg.cluster_spread,
    };
    let train: Vec<SpeakerGroup> = (0..cfg.n_speakers)
        .map(|s| world.speaker(&mut rng, s % cfg.n_clusters, &speaker_name("spk", s), 0, cfg.sessions))
        .collect();
    let mut enroll = Vec::with_capacity(cfg.eval_speakers);
    let mut test = Vec::with_capacity(cfg.eval_speakers);
    for s in 0..cfg.eval_speakers {
        let id = speaker_name("eval", s);
        let all = world.speaker(&mut rng, s % cfg.n_clusters, &id, 0, cfg.enroll_sessions + cfg.test_sessions);
        let (ev, tv) = all.vectors.split_at(cfg.enroll_sessions);
        let (es, ts) = all.segment_ids.split_at(cfg.enroll_sessions);
        enroll.push(SpeakerGroup {
            speaker_id: id.clone(),
            segment_ids: es.to_vec(),
            vectors: ev.to_vec(),
        });
        test.push(SpeakerGroup {
            speaker_id: id,
            segment_ids: ts.to_vec(),
            vectors: tv.to_vec(),
        });
    }
    let mut entries = Vec::with_capacity(cfg.eval_speakers * cfg.eval_speakers * cfg.test_sessions);
    for m in &enroll {
        for t in &test {
            for seg in &t.segment_ids {
                entries.push(Trial {
                    model_id: m.speaker_id.clone(),
                    segment_id: seg.clone(),
                    label: if m.speaker_id == t.speaker_id {
                        TrialLabel::Target
                    } else {
                        TrialLabel::Nontarget
                    },
                });
            }
        }
    }
    let trials = TrialList::new(entries)?;
    let (progress, evaluation) = trials.split(cfg.progress_fraction, cfg.seed ^ 0x5eed)?;
    Ok(BenchData {
        train: LabeledVectorSet::new(cfg.dim, train)?,
        enroll: LabeledVectorSet::new(cfg.dim, enroll)?,
        test: LabeledVectorSet::new(cfg.dim, test)?,
        trials,
        progress,
        evaluation,
        speaker_space: world.f,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub objective: Objective,
    pub train: TrainConfig,
    pub lda_dim: Option<usize>,
    pub kernel: KernelMode,
    pub pooling: EnrollPooling,
}

#[derive(Debug, Clone)]
pub struct SystemResult {
    pub model: PldaModel,
    pub lda: Option<LdaTransform>,
    pub log: TrainingLog,
    pub scores: ScoreList,
    pub progress: EvalSummary,
    pub evaluation: EvalSummary,
}

/// Trains one backend on `data.train` and evaluates it on both trial subsets.
pub fn run_system(data: &BenchData, sys: &SystemConfig, dcf: &DcfParams) -> Result<SystemResult> {
    let (train, lda) = prepare_training(&data.train, sys.lda_dim)?;
    let (model, log) = match sys.objective {
        Objective::Single => train_so(&train, &sys.train)?,
        Objective::Multi => train_mo(&train, &sys.train)?,
    };
    let enroll = prepare_vectors(&data.enroll, lda.as_ref())?;
    let test = prepare_vectors(&data.test, lda.as_ref())?;
    let kernel = build_kernel(&model, sys.kernel)?;
    let scores = score_trials(&kernel, &enroll, &test, &data.trials, sys.pooling)?;
    let progress = EvalSummary::compute(&scores, &data.progress, dcf)?;
    let evaluation = EvalSummary::compute(&scores, &data.evaluation, dcf)?;
    Ok(SystemResult {
        model,
        lda,
        log,
        scores,
        progress,
        evaluation,
    })
}
