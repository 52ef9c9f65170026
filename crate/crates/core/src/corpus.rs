//! Speaker-labeled vector sets, trial lists, their file formats, and the
//! synthetic generator that samples the sGPLDA generative model.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plda::PldaModel;

/// Seeded generator used by every stochastic operation in the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn normal_vector(rng: &mut Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(rng)))
}

/// Formats a float with 17 significant digits, enough for a lossless round-trip.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerGroup {
    pub speaker_id: String,
    pub segment_ids: Vec<String>,
    pub vectors: Vec<DVector<f64>>,
}

impl SpeakerGroup {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut sum = DVector::zeros(self.vectors[0].len());
        for v in &self.vectors {
            sum += v;
        }
        sum / self.vectors.len() as f64
    }
}

/// A speaker-labeled collection of fixed-dimension vectors.
///
/// Speakers keep the order in which they were added; vectors keep their order
/// within a speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVectorSet {
    dim: usize,
    speakers: Vec<SpeakerGroup>,
}

impl LabeledVectorSet {
    pub fn new(dim: usize, speakers: Vec<SpeakerGroup>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidData("dimension must be positive".into()));
        }
        if speakers.is_empty() {
            return Err(Error::Empty);
        }
        let mut seen = HashSet::new();
        for group in &speakers {
            if !seen.insert(group.speaker_id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate speaker id {}", group.speaker_id)));
            }
            if group.vectors.is_empty() {
                return Err(Error::InvalidData(format!("speaker {} has no vectors", group.speaker_id)));
            }
            if group.segment_ids.len() != group.vectors.len() {
                return Err(Error::InvalidData(format!(
                    "speaker {} has {} segment ids for {} vectors",
                    group.speaker_id,
                    group.segment_ids.len(),
                    group.vectors.len()
                )));
            }
            for v in &group.vectors {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v.len(),
                    });
                }
            }
        }
        Ok(Self { dim, speakers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn speakers(&self) -> &[SpeakerGroup] {
        &self.speakers
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_vectors(&self) -> usize {
        self.speakers.iter().map(SpeakerGroup::len).sum()
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerGroup> {
        self.speakers.iter().find(|g| g.speaker_id == id)
    }

    /// Iterates `(speaker index, vector)` over the whole set in storage order.
    pub fn iter_vectors(&self) -> impl Iterator<Item = (usize, &DVector<f64>)> {
        self.speakers
            .iter()
            .enumerate()
            .flat_map(|(s, g)| g.vectors.iter().map(move |v| (s, v)))
    }

    /// Global mean over all vectors.
    pub fn mean(&self) -> DVector<f64> {
        let mut sum = DVector::zeros(self.dim);
        for (_, v) in self.iter_vectors() {
            sum += v;
        }
        sum / self.n_vectors() as f64
    }

    /// Applies `f` to every vector, keeping labels. The output dimension is
    /// taken from the first mapped vector.
    pub fn try_map_vectors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    {
        let mut speakers = Vec::with_capacity(self.speakers.len());
        for g in &self.speakers {
            let vectors = g.vectors.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
            speakers.push(SpeakerGroup {
                speaker_id: g.speaker_id.clone(),
                segment_ids: g.segment_ids.clone(),
                vectors,
            });
        }
        let dim = speakers[0].vectors[0].len();
        Self::new(dim, speakers)
    }

    /// Map from segment id to `(speaker index, vector index)`.
    pub fn segment_index(&self) -> HashMap<&str, (usize, usize)> {
        let mut out = HashMap::new();
        for (s, g) in self.speakers.iter().enumerate() {
            for (i, seg) in g.segment_ids.iter().enumerate() {
                out.entry(seg.as_str()).or_insert((s, i));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorFormat {
    Csv,
    Jsonl,
}

impl VectorFormat {
    /// Picks the format from a file extension, defaulting to csv.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => VectorFormat::Jsonl,
            _ => VectorFormat::Csv,
        }
    }
}

impl FromStr for VectorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(VectorFormat::Csv),
            "jsonl" => Ok(VectorFormat::Jsonl),
            other => Err(Error::InvalidConfig(format!("unknown vector format {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    speaker_id: String,
    segment_id: String,
    vector: Vec<f64>,
}

/// Groups rows into speakers, preserving first-appearance order.
#[derive(Default)]
struct SetBuilder {
    dim: Option<usize>,
    order: Vec<SpeakerGroup>,
    index: HashMap<String, usize>,
    pairs: HashSet<(String, String)>,
}

impl SetBuilder {
    fn push(&mut self, line: usize, speaker: String, segment: String, vector: Vec<f64>) -> Result<()> {
        match self.dim {
            None => {
                if vector.is_empty() {
                    return Err(Error::parse(line, "row has no vector components"));
                }
                self.dim = Some(vector.len());
            }
            Some(d) if d != vector.len() => {
                return Err(Error::parse(
                    line,
                    format!("dimension mismatch: expected {d} components, found {}", vector.len()),
                ));
            }
            Some(_) => {}
        }
        if !self.pairs.insert((speaker.clone(), segment.clone())) {
            return Err(Error::parse(line, format!("duplicate segment ({speaker}, {segment})")));
        }
        let slot = match self.index.get(&speaker) {
            Some(&i) => i,
            None => {
                self.order.push(SpeakerGroup {
                    speaker_id: speaker.clone(),
                    segment_ids: Vec::new(),
                    vectors: Vec::new(),
                });
                self.index.insert(speaker, self.order.len() - 1);
                self.order.len() - 1
            }
        };
        let group = &mut self.order[slot];
        group.segment_ids.push(segment);
        group.vectors.push(DVector::from_vec(vector));
        Ok(())
    }

    fn finish(self) -> Result<LabeledVectorSet> {
        match self.dim {
            None => Err(Error::Empty),
            Some(d) => LabeledVectorSet::new(d, self.order),
        }
    }
}

fn parse_float(line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("malformed number {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

pub fn load_vectors(path: impl AsRef<Path>, format: VectorFormat) -> Result<LabeledVectorSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        VectorFormat::Csv => read_vectors_csv(file),
        VectorFormat::Jsonl => read_vectors_jsonl(BufReader::new(file)),
    }
}

pub fn read_vectors_csv<R: std::io::Read>(reader: R) -> Result<LabeledVectorSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut builder = SetBuilder::default();
    let mut header_seen = false;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if !header_seen {
            header_seen = true;
            if record.get(0) != Some("speaker_id") || record.get(1) != Some("segment_id") {
                return Err(Error::parse(line, "expected header speaker_id,segment_id,v0,..."));
            }
            continue;
        }
        if record.len() < 3 {
            return Err(Error::parse(line, "row needs speaker_id, segment_id and at least one value"));
        }
        let values = record.iter().skip(2).map(|f| parse_float(line, f)).collect::<Result<Vec<_>>>()?;
        builder.push(line, record[0].to_string(), record[1].to_string(), values)?;
    }
    builder.finish()
}

pub fn read_vectors_jsonl<R: BufRead>(reader: R) -> Result<LabeledVectorSet> {
    let mut builder = SetBuilder::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let text = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(&text).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if row.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(lineno, "non-finite value"));
        }
        builder.push(lineno, row.speaker_id, row.segment_id, row.vector)?;
    }
    builder.finish()
}

pub fn save_vectors(set: &LabeledVectorSet, path: impl AsRef<Path>, format: VectorFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        VectorFormat::Csv => write_vectors_csv(set, &mut w),
        VectorFormat::Jsonl => write_vectors_jsonl(set, &mut w),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_vectors_csv<W: Write>(set: &LabeledVectorSet, w: &mut W) -> std::io::Result<()> {
    write!(w, "speaker_id,segment_id")?;
    for i in 0..set.dim() {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for g in set.speakers() {
        for (seg, v) in g.segment_ids.iter().zip(&g.vectors) {
            write!(w, "{},{}", g.speaker_id, seg)?;
            for x in v.iter() {
                write!(w, ",{}", format_f64(*x))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn write_vectors_jsonl<W: Write>(set: &LabeledVectorSet, w: &mut W) -> std::io::Result<()> {
    for g in set.speakers() {
        for (seg, v) in g.segment_ids.iter().zip(&g.vectors) {
            let row = JsonRow {
                speaker_id: g.speaker_id.clone(),
                segment_id: seg.clone(),
                vector: v.iter().copied().collect(),
            };
            serde_json::to_writer(&mut *w, &row)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            "unknown" => Ok(TrialLabel::Unknown),
            other => Err(format!("unrecognized label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_id: String,
    pub segment_id: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    entries: Vec<Trial>,
}

impl TrialList {
    pub fn new(entries: Vec<Trial>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &entries {
            if !seen.insert((t.model_id.as_str(), t.segment_id.as_str())) {
                return Err(Error::InvalidData(format!("duplicate trial ({}, {})", t.model_id, t.segment_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Trial] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Splits the trials into a `fraction` part and the remainder using a
    /// seeded shuffle. Each part keeps the original relative order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(TrialList, TrialList)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!("split fraction {fraction} outside [0, 1]")));
        }
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.shuffle(&mut seeded_rng(seed));
        let n_first = (fraction * self.entries.len() as f64).round() as usize;
        let mut in_first = vec![false; self.entries.len()];
        for &i in &idx[..n_first] {
            in_first[i] = true;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (t, first) in self.entries.iter().zip(in_first) {
            if first {
                a.push(t.clone());
            } else {
                b.push(t.clone());
            }
        }
        Ok((TrialList { entries: a }, TrialList { entries: b }))
    }
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trials(file)
}

pub fn read_trials<R: std::io::Read>(reader: R) -> Result<TrialList> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::parse(e.position().map(|p| p.line() as usize).unwrap_or(0), e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if i == 0 && record.get(0) == Some("model_id") {
            continue;
        }
        if record.len() != 3 {
            return Err(Error::parse(line, "expected model_id,segment_id,label"));
        }
        let label = record[2].parse::<TrialLabel>().map_err(|m| Error::parse(line, m))?;
        let key = (record[0].to_string(), record[1].to_string());
        if !seen.insert(key.clone()) {
            return Err(Error::parse(line, format!("duplicate trial ({}, {})", key.0, key.1)));
        }
        entries.push(Trial {
            model_id: key.0,
            segment_id: key.1,
            label,
        });
    }
    Ok(TrialList { entries })
}

pub fn save_trials(trials: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "model_id,segment_id,label")?;
        for t in trials.entries() {
            writeln!(w, "{},{},{}", t.model_id, t.segment_id, t.label)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub sessions_per_speaker: usize,
    pub dim: usize,
    pub rank: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.sessions_per_speaker == 0 || self.dim == 0 || self.rank == 0 {
            return Err(Error::InvalidConfig("speakers, sessions, dim and rank must be positive".into()));
        }
        if self.rank > self.dim {
            return Err(Error::InvalidConfig(format!("rank {} exceeds dim {}", self.rank, self.dim)));
        }
        // zero noise is allowed so that degenerate fixtures can be produced
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig("noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub(crate) fn speaker_name(prefix: &str, s: usize) -> String {
    format!("{prefix}{s:04}")
}

pub(crate) fn segment_name(speaker: &str, i: usize) -> String {
    format!("{speaker}-{i:02}")
}

/// Samples `x = F h + e` with `h ~ N(0, I)` and `e ~ N(0, noise_scale^2 I)`.
///
/// Draw order: the entries of `F` row by row, then for each speaker its
/// factor followed by the noise of each session.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(LabeledVectorSet, PldaModel)> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let f = draw_matrix(&mut rng, cfg.dim, cfg.rank);
    let mut speakers = Vec::with_capacity(cfg.n_speakers);
    for s in 0..cfg.n_speakers {
        let h = normal_vector(&mut rng, cfg.rank);
        let center = &f * h;
        let id = speaker_name("spk", s);
        let mut group = SpeakerGroup {
            speaker_id: id.clone(),
            segment_ids: Vec::with_capacity(cfg.sessions_per_speaker),
            vectors: Vec::with_capacity(cfg.sessions_per_speaker),
        };
        for i in 0..cfg.sessions_per_speaker {
            let noise = normal_vector(&mut rng, cfg.dim) * cfg.noise_scale;
            group.segment_ids.push(segment_name(&id, i));
            group.vectors.push(&center + noise);
        }
        speakers.push(group);
    }
    let set = LabeledVectorSet::new(cfg.dim, speakers)?;
    let noise_var = cfg.noise_scale * cfg.noise_scale;
    let model = PldaModel {
        mu: DVector::zeros(cfg.dim),
        f,
        sigma_w: DMatrix::identity(cfg.dim, cfg.dim) * noise_var,
        sigma_b: DMatrix::identity(cfg.dim, cfg.dim),
        alpha: None,
    };
    Ok((set, model))
}

pub(crate) fn draw_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = StandardNormal.sample(rng);
        }
    }
    m
}
