//! Mixture synthesis: sample source clips under a partition policy, place
//! each at a random start with a random volume, and overlay them.
//!
//! Every record is generated from its own child seed
//! (`seed::derive(master_seed, record_id)`), so records can be produced in
//! any order and regenerated individually. A [`DatasetManifest`] stores the
//! placements and seeds (no audio); [`render_record`] turns a manifest entry
//! back into bit-identical audio.

mod manifest;
mod sampling;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, Corpus, Fold, PcmClip};
use crate::seed;

pub use manifest::{read_manifest, write_dataset, write_manifest, RecordMeta, ManifestHeader};
pub use sampling::{sample_hybrid, sample_interclass, sample_intraclass, sample_policy, SampledClip};

#[derive(Error, Debug)]
pub enum ForgeError {
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
    #[error("clip of {clip_len} samples does not fit a {track_len}-sample mixture")]
    OversizeClip { clip_len: usize, track_len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forge config: {0}")]
    Config(String),
    #[error("manifest references missing clip: class {class_id}, fold {fold}, index {index}")]
    MissingClip { class_id: u32, fold: Fold, index: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the sources of one mixture are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    /// Sources from pairwise distinct classes.
    Interclass,
    /// All sources from a single class.
    Intraclass,
    /// Sources drawn from the pooled fold, classes may repeat.
    Hybrid,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Interclass, Partition::Intraclass, Partition::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Interclass => "interclass",
            Partition::Intraclass => "intraclass",
            Partition::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "interclass" | "inter" => Ok(Partition::Interclass),
            "intraclass" | "intra" => Ok(Partition::Intraclass),
            "hybrid" => Ok(Partition::Hybrid),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

/// Source counts used by the standard subdatasets.
pub const SOURCE_COUNTS: [usize; 3] = [2, 3, 5];

/// One ⟨partition, source count, fold⟩ subdataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubdatasetId {
    pub partition: Partition,
    pub sources: usize,
    pub fold: Fold,
}

impl SubdatasetId {
    pub fn new(partition: Partition, sources: usize, fold: Fold) -> Self {
        Self { partition, sources, fold }
    }

    /// 10⁴·s training mixtures, 10³·s for validation and test.
    pub fn default_count(&self) -> usize {
        match self.fold {
            Fold::Tr => 10_000 * self.sources,
            Fold::Vl | Fold::Te => 1_000 * self.sources,
        }
    }

    pub fn with_fold(self, fold: Fold) -> Self {
        Self { fold, ..self }
    }
}

impl fmt::Display for SubdatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.partition, self.sources, self.fold)
    }
}

/// How start times are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartPolicy {
    /// `start ~ U(0, L − duration)`; every clip fits entirely.
    #[default]
    Fit,
    /// `start ~ U(0, L)`; clips running past the end are truncated.
    Truncate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    /// Mixture length L in seconds.
    pub mixture_seconds: f64,
    /// Volume floor ε; volumes are drawn from U[ε, 1].
    pub epsilon: f64,
    #[serde(default)]
    pub start_policy: StartPolicy,
}

impl Default for MixParams {
    fn default() -> Self {
        Self { mixture_seconds: 2.0, epsilon: 0.05, start_policy: StartPolicy::Fit }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<(), ForgeError> {
        if !(self.mixture_seconds > 0.0 && self.mixture_seconds.is_finite()) {
            return Err(ForgeError::Config(format!("mixture length {} s", self.mixture_seconds)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(ForgeError::Config(format!("volume floor {} outside (0, 1]", self.epsilon)));
        }
        Ok(())
    }

    pub fn track_len(&self, sample_rate: u32) -> usize {
        (self.mixture_seconds * sample_rate as f64).round() as usize
    }
}

/// Position and gain of one source clip inside a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class_id: u32,
    pub clip_index: usize,
    pub start_s: f64,
    pub volume: f64,
}

impl Placement {
    pub fn start_sample(&self, sample_rate: u32) -> usize {
        (self.start_s * sample_rate as f64).round().max(0.0) as usize
    }
}

/// A rendered mixture with its full-length ground-truth sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRecord {
    pub id: usize,
    pub seed: u64,
    pub placements: Vec<Placement>,
    pub mixture: PcmClip,
    pub sources: Vec<PcmClip>,
    pub clamp_count: usize,
}

impl MixtureRecord {
    pub fn meta(&self) -> RecordMeta {
        RecordMeta {
            record_id: self.id,
            seed: self.seed,
            sources: self.placements.clone(),
            clamp_count: self.clamp_count,
        }
    }
}

/// Writes `clip · volume` into a silent track of `L·rate` samples starting at
/// `round(start·rate)`; samples past the end are dropped.
pub fn place_clip(clip: &PcmClip, placement: &Placement, mixture_seconds: f64) -> Result<PcmClip, ForgeError> {
    let rate = clip.sample_rate();
    let track_len = (mixture_seconds * rate as f64).round() as usize;
    let track = place_samples(clip, placement, track_len)?;
    Ok(PcmClip::new(track, rate)?)
}

fn place_samples(clip: &PcmClip, placement: &Placement, track_len: usize) -> Result<Vec<f32>, ForgeError> {
    if clip.len() > track_len {
        return Err(ForgeError::OversizeClip { clip_len: clip.len(), track_len });
    }
    let mut track = vec![0.0f32; track_len];
    let start = placement.start_sample(clip.sample_rate());
    if start < track_len {
        let n = clip.len().min(track_len - start);
        for (t, &v) in track[start..start + n].iter_mut().zip(clip.samples()) {
            *t = (v as f64 * placement.volume) as f32;
        }
    }
    Ok(track)
}

/// Sample-wise sum of equal-length tracks, hard-clamped to [-1, 1]. Returns
/// the mixture and the number of clamped samples.
pub fn mix(sources: &[PcmClip]) -> Result<(PcmClip, usize), ForgeError> {
    let first = sources.first().ok_or_else(|| ForgeError::Shape("no sources to mix".into()))?;
    let (len, rate) = (first.len(), first.sample_rate());
    if let Some(bad) = sources.iter().find(|s| s.len() != len || s.sample_rate() != rate) {
        return Err(ForgeError::Shape(format!(
            "source of {} samples @ {} Hz vs {len} @ {rate} Hz",
            bad.len(),
            bad.sample_rate()
        )));
    }
    let mut acc = vec![0.0f32; len];
    for s in sources {
        for (a, &v) in acc.iter_mut().zip(s.samples()) {
            *a += v;
        }
    }
    let (mixture, clamps) = clamp_track(acc);
    Ok((PcmClip::new(mixture, rate)?, clamps))
}

fn clamp_track(mut acc: Vec<f32>) -> (Vec<f32>, usize) {
    let mut clamps = 0;
    for a in &mut acc {
        if *a > 1.0 || *a < -1.0 {
            *a = a.clamp(-1.0, 1.0);
            clamps += 1;
        }
    }
    (acc, clamps)
}

/// Samples clips for one record and draws its placements.
pub fn draw_placements(
    corpus: &Corpus,
    id: &SubdatasetId,
    params: &MixParams,
    record_seed: u64,
) -> Result<Vec<Placement>, ForgeError> {
    let mut rng = seed::rng(record_seed);
    let picks = sample_policy(corpus, id.partition, id.sources, id.fold, &mut rng)?;
    let rate = corpus.sample_rate() as f64;
    let track_len = params.track_len(corpus.sample_rate());
    picks
        .iter()
        .map(|pick| {
            if pick.clip.len() > track_len {
                return Err(ForgeError::OversizeClip { clip_len: pick.clip.len(), track_len });
            }
            let latest = match params.start_policy {
                StartPolicy::Fit => (track_len - pick.clip.len()) as f64 / rate,
                StartPolicy::Truncate => params.mixture_seconds,
            };
            let start_s = if latest > 0.0 { rng.gen_range(0.0..latest) } else { 0.0 };
            let volume = if params.epsilon < 1.0 { rng.gen_range(params.epsilon..=1.0) } else { 1.0 };
            Ok(Placement { class_id: pick.class_id, clip_index: pick.clip_index, start_s, volume })
        })
        .collect()
}

fn lookup<'c>(corpus: &'c Corpus, fold: Fold, p: &Placement) -> Result<&'c PcmClip, ForgeError> {
    corpus.clip(p.class_id, fold, p.clip_index).ok_or(ForgeError::MissingClip {
        class_id: p.class_id,
        fold,
        index: p.clip_index,
    })
}

/// Renders audio for a record from its placements.
pub fn render_record(
    corpus: &Corpus,
    fold: Fold,
    params: &MixParams,
    meta: &RecordMeta,
) -> Result<MixtureRecord, ForgeError> {
    let track_len = params.track_len(corpus.sample_rate());
    let sources = meta
        .sources
        .iter()
        .map(|p| place_clip_len(lookup(corpus, fold, p)?, p, track_len))
        .collect::<Result<Vec<_>, _>>()?;
    let (mixture, clamp_count) = mix(&sources)?;
    Ok(MixtureRecord {
        id: meta.record_id,
        seed: meta.seed,
        placements: meta.sources.clone(),
        mixture,
        sources,
        clamp_count,
    })
}

fn place_clip_len(clip: &PcmClip, p: &Placement, track_len: usize) -> Result<PcmClip, ForgeError> {
    Ok(PcmClip::new(place_samples(clip, p, track_len)?, clip.sample_rate())?)
}

/// Counts clamp events without materializing the source tracks.
fn count_clamps(corpus: &Corpus, fold: Fold, track_len: usize, placements: &[Placement]) -> Result<usize, ForgeError> {
    let mut acc = vec![0.0f32; track_len];
    for p in placements {
        let clip = lookup(corpus, fold, p)?;
        let start = p.start_sample(clip.sample_rate());
        if start < track_len {
            let n = clip.len().min(track_len - start);
            for (a, &v) in acc[start..start + n].iter_mut().zip(clip.samples()) {
                *a += (v as f64 * p.volume) as f32;
            }
        }
    }
    Ok(acc.iter().filter(|a| **a > 1.0 || **a < -1.0).count())
}

/// Generates record `record_id` of a subdataset from scratch.
pub fn generate_record(
    corpus: &Corpus,
    id: &SubdatasetId,
    params: &MixParams,
    master_seed: u64,
    record_id: usize,
) -> Result<MixtureRecord, ForgeError> {
    let record_seed = seed::derive(master_seed, record_id as u64);
    let placements = draw_placements(corpus, id, params, record_seed)?;
    let meta = RecordMeta { record_id, seed: record_seed, sources: placements, clamp_count: 0 };
    render_record(corpus, id.fold, params, &meta)
}

/// Index of one subdataset: placements and seeds for every record.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<RecordMeta>,
}

impl DatasetManifest {
    /// Builds a manifest from records in any order; records are sorted by id.
    pub fn from_records(header: ManifestHeader, mut records: Vec<RecordMeta>) -> Self {
        records.sort_by_key(|r| r.record_id);
        Self { header, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subdataset(&self) -> SubdatasetId {
        self.header.subdataset
    }

    /// Lazily renders every record's audio.
    pub fn stream<'a>(&'a self, corpus: &'a Corpus) -> RecordStream<'a> {
        RecordStream { corpus, manifest: self, next: 0 }
    }

    pub fn render(&self, corpus: &Corpus, index: usize) -> Result<MixtureRecord, ForgeError> {
        let meta = self
            .records
            .get(index)
            .ok_or_else(|| ForgeError::Manifest(format!("record index {index} out of range")))?;
        render_record(corpus, self.header.subdataset.fold, &self.header.mix, meta)
    }
}

/// Iterator rendering the records of a manifest one at a time.
pub struct RecordStream<'a> {
    corpus: &'a Corpus,
    manifest: &'a DatasetManifest,
    next: usize,
}

impl Iterator for RecordStream<'_> {
    type Item = Result<MixtureRecord, ForgeError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.records.len() {
            return None;
        }
        let item = self.manifest.render(self.corpus, self.next);
        self.next += 1;
        Some(item)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.manifest.records.len() - self.next;
        (rest, Some(rest))
    }
}

fn plan_record(
    corpus: &Corpus,
    id: &SubdatasetId,
    params: &MixParams,
    master_seed: u64,
    record_id: usize,
) -> Result<RecordMeta, ForgeError> {
    let record_seed = seed::derive(master_seed, record_id as u64);
    let sources = draw_placements(corpus, id, params, record_seed)?;
    let clamp_count = count_clamps(corpus, id.fold, params.track_len(corpus.sample_rate()), &sources)?;
    Ok(RecordMeta { record_id, seed: record_seed, sources, clamp_count })
}

/// Checks one manifest record against its subdataset's sampling policy and
/// the placement bounds: Interclass records use `s` distinct classes,
/// Intraclass records one class and `s` distinct clips, Hybrid records `s`
/// distinct clips; every volume lies in `[ε, 1]` and, under the fit policy,
/// every clip ends inside the mixture.
pub fn check_record(corpus: &Corpus, header: &ManifestHeader, meta: &RecordMeta) -> Result<(), ForgeError> {
    let id = header.subdataset;
    let bad = |m: String| Err(ForgeError::Manifest(format!("record {}: {m}", meta.record_id)));
    if meta.sources.len() != id.sources {
        return bad(format!("{} placements for s = {}", meta.sources.len(), id.sources));
    }
    let mut classes: Vec<u32> = meta.sources.iter().map(|p| p.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut clips: Vec<(u32, usize)> = meta.sources.iter().map(|p| (p.class_id, p.clip_index)).collect();
    clips.sort_unstable();
    clips.dedup();
    match id.partition {
        Partition::Interclass if classes.len() != id.sources => {
            return bad(format!("{} distinct classes in an interclass record", classes.len()));
        }
        Partition::Intraclass if classes.len() != 1 => {
            return bad(format!("{} classes in an intraclass record", classes.len()));
        }
        _ if clips.len() != id.sources => return bad("a clip is used twice".into()),
        _ => {}
    }
    let rate = header.sample_rate;
    let track_len = header.mix.track_len(rate);
    for p in &meta.sources {
        if !(header.mix.epsilon..=1.0).contains(&p.volume) {
            return bad(format!("volume {} outside [{}, 1]", p.volume, header.mix.epsilon));
        }
        let clip = lookup(corpus, id.fold, p)?;
        if p.start_s < 0.0 || (header.mix.start_policy == StartPolicy::Fit && p.start_sample(rate) + clip.len() > track_len)
        {
            return bad(format!("clip at {} s overruns the mixture", p.start_s));
        }
    }
    Ok(())
}

/// Builds the manifest for `count` records of subdataset `id`. Audio is not
/// kept; use [`DatasetManifest::stream`] to render it.
pub fn build_subdataset(
    corpus: &Corpus,
    id: SubdatasetId,
    count: usize,
    master_seed: u64,
    params: &MixParams,
) -> Result<DatasetManifest, ForgeError> {
    params.validate()?;
    if count == 0 {
        return Err(ForgeError::Config("mixture count must be positive".into()));
    }
    if id.sources == 0 {
        return Err(ForgeError::Config("source count must be positive".into()));
    }
    let header = ManifestHeader {
        subdataset: id,
        master_seed,
        corpus_hash: corpus.digest(),
        sample_rate: corpus.sample_rate(),
        mix: *params,
        count,
    };

    #[cfg(feature = "parallel")]
    let records: Result<Vec<_>, _> = {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|i| plan_record(corpus, &id, params, master_seed, i))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records: Result<Vec<_>, _> =
        (0..count).map(|i| plan_record(corpus, &id, params, master_seed, i)).collect();

    Ok(DatasetManifest::from_records(header, records?))
}
