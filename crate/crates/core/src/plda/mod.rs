//! Simplified Gaussian PLDA: the model, its single-objective EM training and
//! the multi-objective training that shares the speaker space `F` between a
//! within-class model and a between-class model.
//!
//! Both objectives use point estimates of the speaker factors. For the
//! within-class model the training maximizes, block by block,
//!
//! ```text
//! f = 1/N * sum_s [ sum_i log N(x_si; mu + F h_s, Sw) + log N(h_s; 0, I) ]
//! ```
//!
//! where `N` is the total number of vectors. The between-class objective `g`
//! has the same form over the between-class sets `y_sk` with `g_s` and `Sb`.

mod io;
mod select;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION};
pub use select::{select_between_class, BetweenClassAssignment, SelectionStrategy, VectorRef};

use crate::corpus::LabeledVectorSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::preprocess::canonical_sign;

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mu: DVector<f64>,
    /// Speaker space, `d x r`.
    pub f: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_b: DMatrix<f64>,
    /// Balance factor used in training, when the model came from
    /// multi-objective training.
    pub alpha: Option<f64>,
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn rank(&self) -> usize {
        self.f.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.rank() == 0 || self.rank() > d {
            return Err(Error::InvalidData(format!("rank {} invalid for dimension {d}", self.rank())));
        }
        if self.mu.len() != d || self.sigma_w.shape() != (d, d) || self.sigma_b.shape() != (d, d) {
            return Err(Error::InvalidData("model matrix shapes are inconsistent".into()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(self.mu.iter().all(|v| v.is_finite()) && finite(&self.f) && finite(&self.sigma_w) && finite(&self.sigma_b)) {
            return Err(Error::InvalidData("model contains non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPosterior {
    pub h: DVector<f64>,
    /// Absent for single-objective training.
    pub g: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rank: usize,
    pub alpha: f64,
    pub iterations: usize,
    pub selection: SelectionStrategy,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            alpha: 1.7,
            iterations: 10,
            selection: SelectionStrategy::Nearest,
            seed: 0,
            variance_floor: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank > dim {
            return Err(Error::InvalidConfig(format!("rank {} must be in 1..={dim}", self.rank)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be positive".into()));
        }
        if !(self.variance_floor >= 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::InvalidConfig("variance floor must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub f_value: f64,
    pub g_value: Option<f64>,
    pub combined: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub iterations: Vec<IterationRecord>,
}

impl TrainingLog {
    pub fn f_values(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.f_value).collect()
    }
}

/// Closed-form factor posterior for a fixed `(F, Sigma)`:
/// `[n F' S^-1 F + I]^-1 F' S^-1 sum(x - mu)`.
pub struct FactorSolver {
    ft_sinv: DMatrix<f64>,
    ft_sinv_f: DMatrix<f64>,
}

impl FactorSolver {
    pub fn new(f: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        let chol = linalg::cholesky(sigma, "residual covariance")?;
        let ft_sinv = chol.solve(f).transpose();
        let ft_sinv_f = linalg::symmetrize(&(&ft_sinv * f));
        Ok(Self { ft_sinv, ft_sinv_f })
    }

    pub fn solve(&self, count: usize, centered_sum: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.ft_sinv_f.nrows();
        let precision = &self.ft_sinv_f * count as f64 + DMatrix::identity(r, r);
        let chol = linalg::cholesky(&precision, "factor posterior precision")?;
        Ok(chol.solve(&(&self.ft_sinv * centered_sum)))
    }
}

fn centered_sum<'a>(mu: &DVector<f64>, vectors: impl IntoIterator<Item = &'a DVector<f64>>) -> (usize, DVector<f64>) {
    let mut sum = DVector::zeros(mu.len());
    let mut n = 0;
    for v in vectors {
        sum += v - mu;
        n += 1;
    }
    (n, sum)
}

/// Posterior mode of the within-class factor `h_s` for one speaker.
pub fn estep_h(model: &PldaModel, vectors: &[DVector<f64>]) -> Result<DVector<f64>> {
    if vectors.is_empty() {
        return Err(Error::InvalidData("speaker has no vectors".into()));
    }
    let (n, sum) = centered_sum(&model.mu, vectors);
    FactorSolver::new(&model.f, &model.sigma_w)?.solve(n, &sum)
}

/// Posterior mode of the between-class factor `g_s` for one between-class set.
pub fn estep_g(model: &PldaModel, between: &[DVector<f64>]) -> Result<DVector<f64>> {
    if between.is_empty() {
        return Err(Error::InvalidData("between-class set is empty".into()));
    }
    let (n, sum) = centered_sum(&model.mu, between);
    FactorSolver::new(&model.f, &model.sigma_b)?.solve(n, &sum)
}

/// Sufficient statistics of one objective for the `F` update:
/// `cross = sum_s sum_k (v_sk - mu) z_s'`, `outer = sum_s n_s z_s z_s'` and
/// `count = sum_s n_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStats {
    pub cross: DMatrix<f64>,
    pub outer: DMatrix<f64>,
    pub count: f64,
}

impl FactorStats {
    pub fn zeros(d: usize, r: usize) -> Self {
        Self {
            cross: DMatrix::zeros(d, r),
            outer: DMatrix::zeros(r, r),
            count: 0.0,
        }
    }

    pub fn accumulate(&mut self, count: usize, centered_sum: &DVector<f64>, factor: &DVector<f64>) {
        self.cross.ger(1.0, centered_sum, factor, 1.0);
        self.outer.ger(count as f64, factor, factor, 1.0);
        self.count += count as f64;
    }

    /// Same count, zero cross and outer terms.
    pub fn zeroed(&self) -> Self {
        Self {
            cross: DMatrix::zeros(self.cross.nrows(), self.cross.ncols()),
            outer: DMatrix::zeros(self.outer.nrows(), self.outer.ncols()),
            count: self.count,
        }
    }
}

/// Speaker-space update. With `between = None` this is the standard
/// single-objective update and `alpha` is ignored.
pub fn mstep_f(within: &FactorStats, between: Option<&FactorStats>, alpha: f64) -> Result<DMatrix<f64>> {
    if within.count <= 0.0 {
        return Err(Error::InvalidData("within-class statistics are empty".into()));
    }
    let (numer, bracket) = match between {
        None => (&within.cross / within.count, &within.outer / within.count),
        Some(b) => {
            if b.count <= 0.0 {
                return Err(Error::InvalidData("between-class statistics are empty".into()));
            }
            let wa = alpha / within.count;
            let wb = 1.0 / b.count;
            (&within.cross * wa - &b.cross * wb, &within.outer * wa - &b.outer * wb)
        }
    };
    let bracket = linalg::symmetrize(&bracket);
    // F = numer * bracket^-1, solved as bracket * F' = numer'
    if let Some(chol) = Cholesky::new(bracket.clone()) {
        return Ok(chol.solve(&numer.transpose()).transpose());
    }
    Ok(numer * psd_pseudo_inverse(&bracket)?)
}

/// Pseudo-inverse of a positive semidefinite matrix. Rank-deficient brackets
/// occur when the speaker factors span fewer than `r` directions (e.g. two
/// speakers with equal session counts).
fn psd_pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = linalg::sorted_eigen(m);
    let top = vals.iter().copied().fold(0.0, f64::max);
    let tol = top * m.nrows() as f64 * f64::EPSILON * 16.0;
    let lowest = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if top <= 0.0 || lowest < -tol {
        return Err(Error::Numerical(format!(
            "speaker-space update matrix is singular or indefinite (eigenvalues in [{lowest:.3e}, {top:.3e}]); \
             reduce the rank or increase alpha"
        )));
    }
    let inv = vals.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    Ok(&vecs * DMatrix::from_diagonal(&inv) * vecs.transpose())
}

/// Scatter of residuals `v - mu - F z` and the number of vectors behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub scatter: DMatrix<f64>,
    pub count: f64,
}

impl ResidualStats {
    pub fn zeros(d: usize) -> Self {
        Self {
            scatter: DMatrix::zeros(d, d),
            count: 0.0,
        }
    }

    pub fn accumulate<'a>(
        &mut self,
        mu: &DVector<f64>,
        f: &DMatrix<f64>,
        factor: &DVector<f64>,
        vectors: impl IntoIterator<Item = &'a DVector<f64>>,
    ) {
        let center = mu + f * factor;
        for v in vectors {
            let r = v - &center;
            self.scatter.ger(1.0, &r, &r, 1.0);
            self.count += 1.0;
        }
    }

    fn covariance(&self, floor: f64) -> Result<DMatrix<f64>> {
        if self.count <= 0.0 {
            return Err(Error::InvalidData("residual statistics are empty".into()));
        }
        Ok(linalg::floor_eigenvalues(&(&self.scatter / self.count), floor))
    }
}

/// Covariance updates: residual scatter over count, symmetrized, with
/// eigenvalues floored at `variance_floor`.
pub fn mstep_covariances(
    within: &ResidualStats,
    between: Option<&ResidualStats>,
    variance_floor: f64,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let sigma_w = within.covariance(variance_floor)?;
    let sigma_b = between.map(|b| b.covariance(variance_floor)).transpose()?;
    Ok((sigma_w, sigma_b))
}

/// Deterministic starting point: the top principal directions of the total
/// covariance scaled by the square roots of their eigenvalues, and half the
/// total covariance for both residual covariances.
pub fn initial_model(set: &LabeledVectorSet, rank: usize, variance_floor: f64) -> Result<PldaModel> {
    let d = set.dim();
    if rank == 0 || rank > d {
        return Err(Error::InvalidConfig(format!("rank {rank} must be in 1..={d}")));
    }
    let mu = set.mean();
    let mut total = DMatrix::zeros(d, d);
    for (_, v) in set.iter_vectors() {
        let c = v - &mu;
        total.ger(1.0, &c, &c, 1.0);
    }
    total /= set.n_vectors() as f64;
    let (vals, vecs) = linalg::sorted_eigen(&total);
    let mut f = DMatrix::zeros(d, rank);
    for k in 0..rank {
        let mut col: DVector<f64> = vecs.column(k).into_owned();
        canonical_sign(&mut col);
        f.set_column(k, &(col * vals[k].max(0.0).sqrt()));
    }
    let half = linalg::floor_eigenvalues(&(total * 0.5), variance_floor);
    Ok(PldaModel {
        mu,
        f,
        sigma_w: half.clone(),
        sigma_b: half,
        alpha: None,
    })
}

/// Objective of one sGPLDA model, averaged over its vectors.
fn objective(
    mu: &DVector<f64>,
    f: &DMatrix<f64>,
    chol: &Cholesky<f64, Dyn>,
    groups: &[Vec<&DVector<f64>>],
    factors: &[DVector<f64>],
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (vs, z) in groups.iter().zip(factors) {
        let center = mu + f * z;
        for v in vs {
            total += linalg::gaussian_log_pdf(v, &center, chol);
            n += 1;
        }
        total += linalg::std_normal_log_pdf(z);
    }
    total / n as f64
}

/// Within-class objective `f` for a model and given speaker factors.
pub fn within_objective(model: &PldaModel, set: &LabeledVectorSet, h: &[DVector<f64>]) -> Result<f64> {
    let chol = linalg::cholesky(&model.sigma_w, "within-class covariance")?;
    let groups: Vec<Vec<&DVector<f64>>> = set.speakers().iter().map(|g| g.vectors.iter().collect()).collect();
    Ok(objective(&model.mu, &model.f, &chol, &groups, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Single,
    Multi { zero_between: bool },
}

/// Step-wise EM driver shared by both training modes.
///
/// Each [`EmTrainer::step`] runs the E-step for every speaker, then the speaker
/// space update, then the covariance updates, and appends one log record.
pub struct EmTrainer<'a> {
    data: &'a LabeledVectorSet,
    cfg: TrainConfig,
    mode: Mode,
    assignment: Option<BetweenClassAssignment>,
    model: PldaModel,
    posteriors: Vec<SpeakerPosterior>,
    log: TrainingLog,
}

impl<'a> EmTrainer<'a> {
    fn check_data(data: &LabeledVectorSet, cfg: &TrainConfig) -> Result<()> {
        if data.n_speakers() < 2 {
            return Err(Error::InvalidData(format!(
                "training needs at least 2 speakers, got {}",
                data.n_speakers()
            )));
        }
        cfg.validate(data.dim())
    }

    pub fn single_objective(data: &'a LabeledVectorSet, cfg: TrainConfig) -> Result<Self> {
        Self::check_data(data, &cfg)?;
        let model = initial_model(data, cfg.rank, cfg.variance_floor)?;
        Ok(Self {
            data,
            cfg,
            mode: Mode::Single,
            assignment: None,
            model,
            posteriors: Vec::new(),
            log: TrainingLog::default(),
        })
    }

    /// Multi-objective trainer; the between-class sets are selected with
    /// `cfg.selection` and `cfg.seed`.
    pub fn multi_objective(data: &'a LabeledVectorSet, cfg: TrainConfig) -> Result<Self> {
        Self::check_data(data, &cfg)?;
        let assignment = select_between_class(data, cfg.selection, cfg.seed)?;
        Self::with_assignment(data, cfg, assignment)
    }

    pub fn with_assignment(
        data: &'a LabeledVectorSet,
        cfg: TrainConfig,
        assignment: BetweenClassAssignment,
    ) -> Result<Self> {
        Self::check_data(data, &cfg)?;
        assignment.check_against(data)?;
        let mut model = initial_model(data, cfg.rank, cfg.variance_floor)?;
        model.alpha = Some(cfg.alpha);
        Ok(Self {
            data,
            cfg,
            mode: Mode::Multi { zero_between: false },
            assignment: Some(assignment),
            model,
            posteriors: Vec::new(),
            log: TrainingLog::default(),
        })
    }

    /// Replaces the between-class contributions to the speaker-space update by
    /// zeros. With `alpha = 1` the update then matches single-objective training.
    pub fn zero_between_statistics(mut self) -> Self {
        if let Mode::Multi { .. } = self.mode {
            self.mode = Mode::Multi { zero_between: true };
        }
        self
    }

    pub fn model(&self) -> &PldaModel {
        &self.model
    }

    /// Factors from the most recent E-step (empty before the first step).
    pub fn posteriors(&self) -> &[SpeakerPosterior] {
        &self.posteriors
    }

    pub fn assignment(&self) -> Option<&BetweenClassAssignment> {
        self.assignment.as_ref()
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn step(&mut self) -> Result<IterationRecord> {
        let iteration = self.log.iterations.len() + 1;
        self.step_inner(iteration)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("iteration {iteration}: {m}")),
                other => other,
            })
    }

    fn between_groups(&self) -> Option<Vec<Vec<&'a DVector<f64>>>> {
        let data = self.data;
        self.assignment.as_ref().map(|a| {
            data.speakers()
                .iter()
                .enumerate()
                .map(|(s, g)| {
                    g.vectors
                        .iter()
                        .chain(a.impostors(s).iter().map(|r| &data.speakers()[r.speaker].vectors[r.index]))
                        .collect()
                })
                .collect()
        })
    }

    fn step_inner(&mut self, iteration: usize) -> Result<IterationRecord> {
        let data = self.data;
        let (d, r) = (data.dim(), self.cfg.rank);
        let mu = self.model.mu.clone();
        let within_groups: Vec<Vec<&DVector<f64>>> = data.speakers().iter().map(|g| g.vectors.iter().collect()).collect();
        let between_groups = self.between_groups();

        // E-step
        let solver_w = FactorSolver::new(&self.model.f, &self.model.sigma_w)?;
        let mut within_stats = FactorStats::zeros(d, r);
        let mut h = Vec::with_capacity(within_groups.len());
        for vs in &within_groups {
            let (n, sum) = centered_sum(&mu, vs.iter().copied());
            let hs = solver_w.solve(n, &sum)?;
            within_stats.accumulate(n, &sum, &hs);
            h.push(hs);
        }
        let mut g = Vec::new();
        let mut between_stats = None;
        if let Some(groups) = &between_groups {
            let zero = matches!(self.mode, Mode::Multi { zero_between: true });
            let solver_b = FactorSolver::new(&self.model.f, &self.model.sigma_b)?;
            let mut stats = FactorStats::zeros(d, r);
            for ys in groups {
                let (n, sum) = centered_sum(&mu, ys.iter().copied());
                let gs = if zero { DVector::zeros(r) } else { solver_b.solve(n, &sum)? };
                stats.accumulate(n, &sum, &gs);
                g.push(gs);
            }
            between_stats = Some(if zero { stats.zeroed() } else { stats });
        }

        // M-step
        let alpha = match self.mode {
            Mode::Single => 1.0,
            Mode::Multi { .. } => self.cfg.alpha,
        };
        let f = mstep_f(&within_stats, between_stats.as_ref(), alpha)?;
        let mut within_res = ResidualStats::zeros(d);
        for (vs, hs) in within_groups.iter().zip(&h) {
            within_res.accumulate(&mu, &f, hs, vs.iter().copied());
        }
        let between_res = between_groups.as_ref().map(|groups| {
            let mut res = ResidualStats::zeros(d);
            for (ys, gs) in groups.iter().zip(&g) {
                res.accumulate(&mu, &f, gs, ys.iter().copied());
            }
            res
        });
        let (sigma_w, sigma_b) = mstep_covariances(&within_res, between_res.as_ref(), self.cfg.variance_floor)?;

        self.model.f = f;
        self.model.sigma_w = sigma_w;
        self.model.sigma_b = match sigma_b {
            Some(sb) => sb,
            None => self.model.sigma_w.clone(),
        };

        let chol_w = linalg::cholesky(&self.model.sigma_w, "within-class covariance")?;
        let f_value = objective(&mu, &self.model.f, &chol_w, &within_groups, &h);
        let (g_value, combined) = match &between_groups {
            Some(groups) => {
                let chol_b = linalg::cholesky(&self.model.sigma_b, "between-class covariance")?;
                let gv = objective(&mu, &self.model.f, &chol_b, groups, &g);
                (Some(gv), Some(alpha * f_value - gv))
            }
            None => (None, None),
        };

        self.posteriors = if g.is_empty() {
            h.into_iter().map(|h| SpeakerPosterior { h, g: None }).collect()
        } else {
            h.into_iter().zip(g).map(|(h, g)| SpeakerPosterior { h, g: Some(g) }).collect()
        };
        let record = IterationRecord {
            iteration,
            f_value,
            g_value,
            combined,
        };
        self.log.iterations.push(record);
        Ok(record)
    }

    pub fn run(mut self) -> Result<(PldaModel, TrainingLog)> {
        while self.log.iterations.len() < self.cfg.iterations {
            self.step()?;
        }
        Ok((self.model, self.log))
    }
}

/// Single-objective sGPLDA training. The returned model has `sigma_b = sigma_w`.
pub fn train_so(set: &LabeledVectorSet, cfg: &TrainConfig) -> Result<(PldaModel, TrainingLog)> {
    EmTrainer::single_objective(set, cfg.clone())?.run()
}

/// Multi-objective sGPLDA training with between-class sets chosen by
/// `cfg.selection`.
pub fn train_mo(set: &LabeledVectorSet, cfg: &TrainConfig) -> Result<(PldaModel, TrainingLog)> {
    EmTrainer::multi_objective(set, cfg.clone())?.run()
}
