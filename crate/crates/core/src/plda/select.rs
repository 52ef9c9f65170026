use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::index;

use crate::corpus::{seeded_rng, LabeledVectorSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    Nearest,
    Random,
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(SelectionStrategy::Nearest),
            "random" => Ok(SelectionStrategy::Random),
            other => Err(Error::InvalidConfig(format!("unknown selection strategy {other:?}"))),
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Nearest => "nearest",
            SelectionStrategy::Random => "random",
        })
    }
}

/// Position of a vector inside a [`LabeledVectorSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VectorRef {
    pub speaker: usize,
    pub index: usize,
}

/// For every speaker, the vectors of other speakers that join its own vectors
/// to form its between-class set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BetweenClassAssignment {
    impostors: Vec<Vec<VectorRef>>,
}

impl BetweenClassAssignment {
    pub fn new(impostors: Vec<Vec<VectorRef>>) -> Result<Self> {
        for (s, list) in impostors.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::InvalidData(format!("speaker index {s} has an empty between-class selection")));
            }
            if let Some(bad) = list.iter().find(|r| r.speaker == s) {
                return Err(Error::InvalidData(format!(
                    "speaker index {s} selects its own vector {}",
                    bad.index
                )));
            }
        }
        Ok(Self { impostors })
    }

    pub fn n_speakers(&self) -> usize {
        self.impostors.len()
    }

    /// The selected vectors of other speakers for speaker `s`.
    pub fn impostors(&self, s: usize) -> &[VectorRef] {
        &self.impostors[s]
    }

    /// `sK = sI + sJ` for speaker `s` of `set`.
    pub fn between_count(&self, set: &LabeledVectorSet, s: usize) -> usize {
        set.speakers()[s].len() + self.impostors[s].len()
    }

    pub(crate) fn check_against(&self, set: &LabeledVectorSet) -> Result<()> {
        if self.impostors.len() != set.n_speakers() {
            return Err(Error::InvalidData(format!(
                "assignment covers {} speakers, data has {}",
                self.impostors.len(),
                set.n_speakers()
            )));
        }
        for list in &self.impostors {
            for r in list {
                let ok = set.speakers().get(r.speaker).is_some_and(|g| r.index < g.len());
                if !ok {
                    return Err(Error::InvalidData(format!("vector reference {r:?} out of range")));
                }
            }
        }
        Ok(())
    }
}

/// Picks `sI` vectors of other speakers for each speaker.
///
/// `Nearest` ranks every vector of every other speaker by its inner product
/// with the speaker's mean vector (descending; ties by storage order) and takes
/// the top `sI`. `Random` draws `sI` of them uniformly without replacement from
/// one generator seeded with `seed`, visiting speakers in order.
pub fn select_between_class(
    set: &LabeledVectorSet,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<BetweenClassAssignment> {
    if set.n_speakers() < 2 {
        return Err(Error::InvalidData(format!(
            "between-class selection needs at least 2 speakers, got {}",
            set.n_speakers()
        )));
    }
    let all: Vec<(VectorRef, &DVector<f64>)> = set
        .speakers()
        .iter()
        .enumerate()
        .flat_map(|(s, g)| g.vectors.iter().enumerate().map(move |(i, v)| (VectorRef { speaker: s, index: i }, v)))
        .collect();
    let mut rng = seeded_rng(seed);
    let mut impostors = Vec::with_capacity(set.n_speakers());
    for (s, group) in set.speakers().iter().enumerate() {
        let candidates: Vec<(VectorRef, &DVector<f64>)> = all.iter().filter(|(r, _)| r.speaker != s).copied().collect();
        let want = group.len();
        if candidates.len() < want {
            return Err(Error::InvalidData(format!(
                "speaker {} needs {want} between-class vectors but only {} candidates exist",
                group.speaker_id,
                candidates.len()
            )));
        }
        let chosen = match strategy {
            SelectionStrategy::Nearest => {
                let anchor = group.mean();
                let mut scored: Vec<(f64, usize)> =
                    candidates.iter().enumerate().map(|(c, (_, v))| (anchor.dot(v), c)).collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                scored.iter().take(want).map(|&(_, c)| candidates[c].0).collect()
            }
            SelectionStrategy::Random => {
                let mut picks = index::sample(&mut rng, candidates.len(), want).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|c| candidates[c].0).collect()
            }
        };
        impostors.push(chosen);
    }
    BetweenClassAssignment::new(impostors)
}
