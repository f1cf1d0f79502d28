use rand::seq::index;
use rand::Rng;

use super::{ForgeError, Partition};
use crate::audio::{Corpus, Fold, PcmClip};

/// A clip chosen for a mixture, with its corpus coordinates.
#[derive(Clone, Copy, Debug)]
pub struct SampledClip<'a> {
    pub class_id: u32,
    pub clip_index: usize,
    pub clip: &'a PcmClip,
}

/// `s` clips from `s` distinct classes, one uniform clip per class.
pub fn sample_interclass<'a>(
    corpus: &'a Corpus,
    s: usize,
    fold: Fold,
    rng: &mut impl Rng,
) -> Result<Vec<SampledClip<'a>>, ForgeError> {
    let eligible: Vec<_> = corpus.classes().iter().filter(|c| !c.fold(fold).is_empty()).collect();
    if eligible.len() < s {
        return Err(ForgeError::InsufficientCorpus(format!(
            "{} classes with {fold} clips, need {s}",
            eligible.len()
        )));
    }
    let picks = index::sample(rng, eligible.len(), s);
    Ok(picks
        .into_iter()
        .map(|ci| {
            let class = eligible[ci];
            let clips = class.fold(fold);
            let clip_index = rng.gen_range(0..clips.len());
            SampledClip { class_id: class.class_id, clip_index, clip: &clips[clip_index] }
        })
        .collect())
}

/// One uniformly chosen class (among those with at least `s` clips in the
/// fold) and `s` distinct clips from it.
pub fn sample_intraclass<'a>(
    corpus: &'a Corpus,
    s: usize,
    fold: Fold,
    rng: &mut impl Rng,
) -> Result<Vec<SampledClip<'a>>, ForgeError> {
    let eligible: Vec<_> = corpus.classes().iter().filter(|c| c.fold(fold).len() >= s).collect();
    if eligible.is_empty() {
        return Err(ForgeError::InsufficientCorpus(format!("no class has {s} clips in fold {fold}")));
    }
    let class = eligible[rng.gen_range(0..eligible.len())];
    let clips = class.fold(fold);
    Ok(index::sample(rng, clips.len(), s)
        .into_iter()
        .map(|i| SampledClip { class_id: class.class_id, clip_index: i, clip: &clips[i] })
        .collect())
}

/// `s` distinct clips drawn uniformly from the union of every class's fold.
pub fn sample_hybrid<'a>(
    corpus: &'a Corpus,
    s: usize,
    fold: Fold,
    rng: &mut impl Rng,
) -> Result<Vec<SampledClip<'a>>, ForgeError> {
    let pool: Vec<SampledClip<'a>> = corpus
        .classes()
        .iter()
        .flat_map(|c| {
            c.fold(fold)
                .iter()
                .enumerate()
                .map(move |(i, clip)| SampledClip { class_id: c.class_id, clip_index: i, clip })
        })
        .collect();
    if pool.len() < s {
        return Err(ForgeError::InsufficientCorpus(format!(
            "{} clips in fold {fold}, need {s}",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), s).into_iter().map(|i| pool[i]).collect())
}

pub fn sample_policy<'a>(
    corpus: &'a Corpus,
    partition: Partition,
    s: usize,
    fold: Fold,
    rng: &mut impl Rng,
) -> Result<Vec<SampledClip<'a>>, ForgeError> {
    match partition {
        Partition::Interclass => sample_interclass(corpus, s, fold, rng),
        Partition::Intraclass => sample_intraclass(corpus, s, fold, rng),
        Partition::Hybrid => sample_hybrid(corpus, s, fold, rng),
    }
}
