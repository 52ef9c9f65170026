//! Brute-force oracles shared by the integration tests. Nothing here calls the
//! code path it is used to check.
#![allow(dead_code)]

use mosgplda::corpus::{LabeledVectorSet, SpeakerGroup};
use mosgplda::metrics::DetPoint;
use mosgplda::plda::PldaModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle free of the library's sampling helpers.
    let u1: f64 = r.random::<f64>().max(1e-300);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gauss_vec(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(r))
}

pub fn gauss_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gauss(r))
}

/// A well-conditioned random SPD matrix.
pub fn random_spd(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = gauss_mat(r, n, n);
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
}

pub fn random_model(r: &mut ChaCha8Rng, d: usize, rank: usize) -> PldaModel {
    PldaModel {
        mu: gauss_vec(r, d),
        f: gauss_mat(r, d, rank),
        sigma_w: random_spd(r, d),
        sigma_b: random_spd(r, d),
        alpha: None,
    }
}

pub fn set_from(dim: usize, groups: Vec<Vec<DVector<f64>>>) -> LabeledVectorSet {
    let speakers = groups
        .into_iter()
        .enumerate()
        .map(|(s, vs)| SpeakerGroup {
            speaker_id: format!("s{s}"),
            segment_ids: (0..vs.len()).map(|i| format!("s{s}_{i}")).collect(),
            vectors: vs,
        })
        .collect();
    LabeledVectorSet::new(dim, speakers).unwrap()
}

/// Gaussian log density through an explicit inverse and LU determinant.
pub fn log_normal(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    let inv = cov.clone().try_inverse().unwrap();
    let quad = (diff.transpose() * inv * &diff)[(0, 0)];
    -0.5 * (quad + cov.determinant().ln() + d * (2.0 * std::f64::consts::PI).ln())
}

/// `sum_i log N(x_i; mu + F z, cov) + log N(z; 0, I)`.
pub fn log_posterior(z: &DVector<f64>, xs: &[DVector<f64>], mu: &DVector<f64>, f: &DMatrix<f64>, cov: &DMatrix<f64>) -> f64 {
    let mean = mu + f * z;
    let lik: f64 = xs.iter().map(|x| log_normal(x, &mean, cov)).sum();
    lik - 0.5 * z.norm_squared() - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Central-difference gradient and the largest diagonal second difference.
pub fn fd_gradient_and_curvature(obj: impl Fn(&DVector<f64>) -> f64, z: &DVector<f64>, step: f64) -> (DVector<f64>, f64) {
    let mut grad = DVector::zeros(z.len());
    let mut curv: f64 = 0.0;
    let f0 = obj(z);
    for k in 0..z.len() {
        let mut plus = z.clone();
        let mut minus = z.clone();
        plus[k] += step;
        minus[k] -= step;
        let (fp, fm) = (obj(&plus), obj(&minus));
        grad[k] = (fp - fm) / (2.0 * step);
        curv = curv.max(((2.0 * f0 - fp - fm) / (step * step)).abs());
    }
    (grad, curv)
}

/// DET points by direct counting at every distinct score and at `+inf`.
/// `forced` targets are misses at every threshold.
pub fn brute_det(targets: &[f64], nontargets: &[f64], forced: usize) -> Vec<DetPoint> {
    let mut ths: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    ths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ths.dedup();
    ths.push(f64::INFINITY);
    let nt = (targets.len() + forced) as f64;
    let nn = nontargets.len() as f64;
    ths.into_iter()
        .map(|t| DetPoint {
            threshold: t,
            p_miss: (targets.iter().filter(|&&s| s < t).count() + forced) as f64 / nt,
            p_fa: nontargets.iter().filter(|&&s| s >= t).count() as f64 / nn,
        })
        .collect()
}

/// First exact crossing, else linear interpolation between the bracketing
/// points, scanning thresholds upward.
pub fn brute_eer(points: &[DetPoint]) -> f64 {
    for i in 0..points.len() {
        let p = &points[i];
        if p.p_miss == p.p_fa {
            return p.p_miss;
        }
        if p.p_miss > p.p_fa {
            if i == 0 {
                return p.p_miss;
            }
            let q = &points[i - 1];
            let (d0, d1) = (q.p_miss - q.p_fa, p.p_miss - p.p_fa);
            let t = -d0 / (d1 - d0);
            return q.p_miss + t * (p.p_miss - q.p_miss);
        }
    }
    unreachable!("the +inf point always crosses")
}

pub fn brute_min_dcf(points: &[DetPoint], miss_w: f64, fa_w: f64) -> f64 {
    let mut best = f64::INFINITY;
    for p in points {
        let c = miss_w * p.p_miss + fa_w * p.p_fa;
        if c < best {
            best = c;
        }
    }
    best
}

/// Row maxima with the first maximizing column.
pub fn brute_row_max(row: &[f64]) -> (f64, usize) {
    let mut j_best = 0;
    for j in 0..row.len() {
        if row[j] > row[j_best] {
            j_best = j;
        }
    }
    (row[j_best], j_best)
}

pub fn brute_top_s(matrix: &[Vec<f64>], bl: &[bool]) -> f64 {
    let (mut t, mut n) = (vec![], vec![]);
    for (row, &b) in matrix.iter().zip(bl) {
        let m = brute_row_max(row).0;
        if b { t.push(m) } else { n.push(m) }
    }
    brute_eer(&brute_det(&t, &n, 0))
}

pub fn brute_top_1(matrix: &[Vec<f64>], bl: &[bool], truth: &[Option<usize>]) -> f64 {
    let (mut t, mut n, mut forced) = (vec![], vec![], 0);
    for (i, (row, &b)) in matrix.iter().zip(bl).enumerate() {
        let (m, j) = brute_row_max(row);
        if !b {
            n.push(m);
        } else if truth[i] == Some(j) {
            t.push(m);
        } else {
            forced += 1;
        }
    }
    brute_eer(&brute_det(&t, &n, forced))
}

/// Nearest between-class vectors by exhaustive scoring: for each speaker, all
/// vectors of other speakers ranked by inner product with the speaker mean
/// (descending, ties by storage order), first `sI` kept. Entries are
/// `(speaker, index)`.
pub fn brute_nearest(set: &LabeledVectorSet) -> Vec<Vec<(usize, usize)>> {
    let sp = set.speakers();
    let mut out = vec![];
    for (s, g) in sp.iter().enumerate() {
        let mut mean = vec![0.0; set.dim()];
        for v in &g.vectors {
            for k in 0..set.dim() {
                mean[k] += v[k];
            }
        }
        for m in mean.iter_mut() {
            *m /= g.vectors.len() as f64;
        }
        let mut cands = vec![];
        let mut storage = 0usize;
        for (o, og) in sp.iter().enumerate() {
            for (i, v) in og.vectors.iter().enumerate() {
                if o != s {
                    let ip: f64 = (0..set.dim()).map(|k| mean[k] * v[k]).sum();
                    cands.push((ip, storage, (o, i)));
                }
                storage += 1;
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(cands.into_iter().take(g.vectors.len()).map(|c| c.2).collect());
    }
    out
}

/// Largest principal angle between column spans, in degrees, from the
/// eigenvalues of the projector product.
pub fn principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let proj = |m: &DMatrix<f64>| {
        let g = (m.transpose() * m).try_inverse().unwrap();
        m * g * m.transpose()
    };
    let (pa, pb) = (proj(a), proj(b));
    // cos^2 of the angles are the nonzero eigenvalues of Pa Pb Pa
    let m = &pa * &pb * &pa;
    let m = (&m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let smallest = ev[a.ncols().min(b.ncols()) - 1].clamp(0.0, 1.0);
    smallest.sqrt().acos().to_degrees()
}
