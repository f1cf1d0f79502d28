//! Training, evaluation, separation and the checkpoint lifecycle.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioError, Corpus, Fold, PcmClip};
use crate::autodiff::{
    config_digest, read_checkpoint, write_checkpoint, AdamConfig, AdamState, AutodiffError, Checkpoint, Gradients,
    ParamId, Tape, Tensor,
};
use crate::bijection::{greedy_bijection_loss, greedy_bijection_on_tape, BijectionError};
use crate::dsp::{istft_samples, stft, stft_samples, DspError, Spectrogram, StftParams};
use crate::forge::{DatasetManifest, ForgeError, MixParams, MixtureRecord, Partition, SubdatasetId};
use crate::seed;
use crate::stt::{mixture_projection, SttConfig, SttError, SttModel};

/// Learning rates searched in the reference setup.
pub const LR_GRID: [f64; 3] = [0.001, 0.0005, 0.0001];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize, last_good: Option<Box<Checkpoint>> },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("input sample rate {got} Hz, model expects {expected} Hz")]
    Rate { expected: u32, got: u32 },
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] SttError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] BijectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Signal-level settings shared by data synthesis and the model shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub sample_rate: u32,
    pub mixture_seconds: f64,
    pub stft: StftParams,
    /// Mixtures per fold (train, validation, test); `None` uses 10⁴·s and 10³·s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<[usize; 3]>,
}

impl Profile {
    /// 2 s at 44.1 kHz, `n_fft` 256, hop 192.
    pub fn studio() -> Self {
        Self { sample_rate: 44_100, mixture_seconds: 2.0, stft: StftParams { n_fft: 256, hop: 192 }, counts: None }
    }

    /// 1 s at 8 kHz, `n_fft` 128, hop 96, 200/40/40 mixtures.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8_000,
            mixture_seconds: 1.0,
            stft: StftParams { n_fft: 128, hop: 96 },
            counts: Some([200, 40, 40]),
        }
    }

    pub fn track_len(&self) -> usize {
        (self.mixture_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn frames(&self) -> usize {
        self.stft.frames(self.track_len())
    }

    pub fn count(&self, id: SubdatasetId) -> usize {
        match self.counts {
            Some(c) => c[id.fold.index()],
            None => id.default_count(),
        }
    }

    pub fn mix_params(&self) -> MixParams {
        MixParams { mixture_seconds: self.mixture_seconds, ..MixParams::default() }
    }

    /// Model configuration sized to this profile.
    pub fn stt(&self, sources: usize) -> SttConfig {
        let base = if self.sample_rate == 44_100 { SttConfig::studio(sources) } else { SttConfig::desk(sources) };
        SttConfig { height: self.stft.height(), frames: self.frames(), ..base }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.stft.validate()?;
        if self.sample_rate == 0 || !(self.mixture_seconds > 0.0) {
            return Err(TrainError::Config(format!("bad profile {self:?}")));
        }
        if !self.stft.invertible_len(self.track_len()) {
            return Err(TrainError::Config(format!(
                "{} samples cannot be inverted with n_fft {} and hop {}",
                self.track_len(),
                self.stft.n_fft,
                self.stft.hop
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub subdataset: SubdatasetId,
    pub stt: SttConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Sum per-item gradients in a fixed order so runs are bitwise repeatable.
    pub deterministic: bool,
    pub profile: Profile,
}

impl TrainConfig {
    pub fn desk(partition: Partition, sources: usize) -> Self {
        let profile = Profile::desk();
        Self {
            subdataset: SubdatasetId::new(partition, sources, Fold::Tr),
            stt: profile.stt(sources),
            lr: LR_GRID[0],
            batch_size: 8,
            max_steps: 2000,
            eval_every: 100,
            seed: 0,
            deterministic: true,
            profile,
        }
    }

    pub fn studio(partition: Partition, sources: usize) -> Self {
        let profile = Profile::studio();
        Self { profile, stt: profile.stt(sources), max_steps: 100_000, eval_every: 1000, ..Self::desk(partition, sources) }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.profile.validate()?;
        self.stt.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch size and evaluation interval must be positive".into());
        }
        if self.stt.sources != self.subdataset.sources {
            return bad(format!("model emits {} sources, subdataset has {}", self.stt.sources, self.subdataset.sources));
        }
        card_matches(&ModelCard::new(self), &self.profile)
    }
}

/// Everything needed to rebuild a model and feed it: the text hashed into
/// a checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub stt: SttConfig,
    pub stft: StftParams,
    pub sample_rate: u32,
    pub mixture_seconds: f64,
}

impl ModelCard {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            stt: cfg.stt.clone(),
            stft: cfg.profile.stft,
            sample_rate: cfg.profile.sample_rate,
            mixture_seconds: cfg.profile.mixture_seconds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("card serializes")
    }

    pub fn digest(&self) -> String {
        config_digest(&self.to_json())
    }

    pub fn track_len(&self) -> usize {
        (self.mixture_seconds * self.sample_rate as f64).round() as usize
    }
}

fn card_matches(card: &ModelCard, profile: &Profile) -> Result<(), TrainError> {
    let want = (profile.stft.height(), profile.frames(), profile.sample_rate, profile.stft);
    let got = (card.stt.height, card.stt.frames, card.sample_rate, card.stft);
    if want != got {
        return Err(TrainError::Incompatible(format!(
            "model expects {}×{} frames×rows at {} Hz ({:?}), data gives {}×{} at {} Hz ({:?})",
            got.1, got.0, got.2, got.3, want.1, want.0, want.2, want.3
        )));
    }
    Ok(())
}

/// A model ready for inference together with its card.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub card: ModelCard,
    pub model: SttModel<f32>,
}

impl LoadedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let card: ModelCard =
            serde_json::from_str(&ck.config).map_err(|e| TrainError::Incompatible(format!("config: {e}")))?;
        if card.stt.height != card.stft.height() {
            return Err(TrainError::Incompatible(format!(
                "model height {} does not match n_fft {}",
                card.stt.height, card.stft.n_fft
            )));
        }
        let mut model = SttModel::<f32>::new(card.stt.clone(), 0)?;
        model.params_mut().load_named(&ck.tensors).map_err(|e| TrainError::Incompatible(e.to_string()))?;
        Ok(Self { card, model })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.card.to_json(), self.model.params())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    write_checkpoint(ck, std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Ok(read_checkpoint(std::fs::File::open(path)?)?)
}

/// One mixture and its ground-truth sources as spectrograms.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub mixture: Spectrogram,
    pub sources: Vec<Spectrogram>,
}

impl Example {
    pub fn from_record(rec: &MixtureRecord, params: &StftParams) -> Result<Self, TrainError> {
        Ok(Self {
            mixture: stft(&rec.mixture, params)?,
            sources: rec.sources.iter().map(|s| stft(s, params)).collect::<Result<_, _>>()?,
        })
    }

    fn tensors(&self) -> Result<(Tensor<f32>, Vec<Tensor<f32>>), TrainError> {
        let shape = [self.mixture.frames(), self.mixture.height()];
        let m = Tensor::from_f64(&shape, self.mixture.data())?;
        let t = self.sources.iter().map(|s| Tensor::from_f64(&shape, s.data())).collect::<Result<_, _>>()?;
        Ok((m, t))
    }
}

#[derive(Clone, Copy, Debug)]
enum Audio<'a> {
    Render(&'a Corpus),
    Disk(&'a Path),
}

/// A manifest plus where its audio comes from: rendered on demand from a
/// corpus, or read from a materialized dataset directory.
#[derive(Clone, Copy, Debug)]
pub struct DataSource<'a> {
    manifest: &'a DatasetManifest,
    audio: Audio<'a>,
}

impl<'a> DataSource<'a> {
    pub fn rendered(manifest: &'a DatasetManifest, corpus: &'a Corpus) -> Self {
        Self { manifest, audio: Audio::Render(corpus) }
    }

    pub fn on_disk(manifest: &'a DatasetManifest, root: &'a Path) -> Self {
        Self { manifest, audio: Audio::Disk(root) }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn record(&self, index: usize) -> Result<MixtureRecord, TrainError> {
        Ok(match self.audio {
            Audio::Render(c) => self.manifest.render(c, index)?,
            Audio::Disk(root) => self.manifest.load_record(root, index)?,
        })
    }

    pub fn example(&self, index: usize, params: &StftParams) -> Result<Example, TrainError> {
        Example::from_record(&self.record(index)?, params)
    }

    fn check_profile(&self, profile: &Profile) -> Result<(), TrainError> {
        let h = &self.manifest.header;
        if h.sample_rate != profile.sample_rate || h.mix.mixture_seconds != profile.mixture_seconds {
            return Err(TrainError::Incompatible(format!(
                "dataset is {} s at {} Hz, profile wants {} s at {} Hz",
                h.mix.mixture_seconds, h.sample_rate, profile.mixture_seconds, profile.sample_rate
            )));
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRow {
    Step { step: usize, loss: f64, wall_s: f64 },
    Eval { step: usize, val_loss: f64, baseline_loss: f64, wall_s: f64 },
}

impl LogRow {
    pub fn step(&self) -> usize {
        match self {
            Self::Step { step, .. } | Self::Eval { step, .. } => *step,
        }
    }

    fn without_time(&self) -> Self {
        match self.clone() {
            Self::Step { step, loss, .. } => Self::Step { step, loss, wall_s: 0.0 },
            Self::Eval { step, val_loss, baseline_loss, .. } => Self::Eval { step, val_loss, baseline_loss, wall_s: 0.0 },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn train_losses(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().filter_map(|r| match r {
            LogRow::Step { step, loss, .. } => Some((*step, *loss)),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.rows.iter().filter_map(|r| match r {
            LogRow::Eval { step, val_loss, baseline_loss, .. } => Some((*step, *val_loss, *baseline_loss)),
            _ => None,
        })
    }

    /// Equality of everything but wall-clock time.
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.without_time() == b.without_time())
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), TrainError> {
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl std::io::Read) -> Result<Self, TrainError> {
        use std::io::BufRead;
        let mut rows = Vec::new();
        for line in std::io::BufReader::new(r).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                rows.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { rows })
    }
}

/// Mean greedy bijection loss of a model and of mixture projection on one set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mixtures: usize,
    pub model_loss: f64,
    pub baseline_loss: f64,
}

/// Mean loss of mixture projection alone.
pub fn evaluate_baseline(data: &DataSource<'_>, params: &StftParams) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let ex = data.example(i, params)?;
        total += greedy_bijection_loss(&mixture_projection(&ex.mixture, ex.sources.len()), &ex.sources)?.0;
    }
    Ok(total / data.len() as f64)
}

fn evaluate_model(model: &SttModel<f32>, card: &ModelCard, data: &DataSource<'_>) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut model_total, mut base_total) = (0.0, 0.0);
    for i in 0..data.len() {
        let ex = data.example(i, &card.stft)?;
        if ex.sources.len() != card.stt.sources {
            return Err(TrainError::Incompatible(format!(
                "model separates {} sources, record {i} has {}",
                card.stt.sources,
                ex.sources.len()
            )));
        }
        let preds = model.predict(&ex.mixture)?;
        if preds.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            model_total = f64::NAN;
        } else {
            model_total += greedy_bijection_loss(&preds, &ex.sources)?.0;
        }
        base_total += greedy_bijection_loss(&mixture_projection(&ex.mixture, ex.sources.len()), &ex.sources)?.0;
    }
    let n = data.len() as f64;
    Ok(EvalReport { mixtures: data.len(), model_loss: model_total / n, baseline_loss: base_total / n })
}

/// Evaluates a checkpoint with dropout off.
pub fn evaluate(ck: &Checkpoint, data: &DataSource<'_>) -> Result<EvalReport, TrainError> {
    let loaded = LoadedModel::from_checkpoint(ck)?;
    let h = &data.manifest().header;
    let profile = Profile {
        sample_rate: h.sample_rate,
        mixture_seconds: h.mix.mixture_seconds,
        stft: loaded.card.stft,
        counts: None,
    };
    card_matches(&loaded.card, &profile)?;
    evaluate_model(&loaded.model, &loaded.card, data)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the lowest validation loss.
    pub best: Checkpoint,
    pub best_val_loss: f64,
    /// Parameters after the last step.
    pub last: Checkpoint,
    pub log: RunLog,
}

/// Optional side outputs of [`train`].
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// Receives each log row as a JSON line as soon as it is produced.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for `best.ckpt` (rewritten on improvement) and `last.ckpt`.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Training examples of one step, produced off the training thread.
type Batch = Result<Vec<(Tensor<f32>, Vec<Tensor<f32>>)>, TrainError>;

fn batch_order(n: usize, steps: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed);
    let mut pool: Vec<usize> = Vec::new();
    (0..steps)
        .map(|_| {
            (0..batch)
                .map(|_| {
                    if pool.is_empty() {
                        pool = (0..n).collect();
                        pool.shuffle(&mut rng);
                    }
                    pool.pop().expect("refilled above")
                })
                .collect()
        })
        .collect()
}

/// Loss and parameter gradients of one item; the loss is scaled by `weight`
/// before differentiation.
fn item_grad(
    model: &SttModel<f32>,
    mixture: &Tensor<f32>,
    truths: &[Tensor<f32>],
    weight: f32,
    rng: Option<&mut dyn RngCore>,
) -> Result<(f64, Gradients<f32>), TrainError> {
    let tape = Tape::new();
    let pass = model.forward(&tape, mixture, rng)?;
    if pass.sources.iter().any(|&v| !tape.value(v).all_finite()) {
        return Err(TrainError::Diverged { step: 0, last_good: None });
    }
    let (loss, _) = greedy_bijection_on_tape(&tape, &pass.sources, truths)?;
    let value = tape.scalar(loss) as f64;
    let scaled = tape.scale(loss, weight);
    Ok((value, tape.backward(scaled)?))
}

fn batch_grads(
    model: &SttModel<f32>,
    items: &[(Tensor<f32>, Vec<Tensor<f32>>)],
    dropout_seed: u64,
) -> Result<Vec<(f64, Gradients<f32>)>, TrainError> {
    let weight = 1.0 / items.len() as f32;
    let use_dropout = model.config().dropout > 0.0;
    let run = |(i, (m, t)): (usize, &(Tensor<f32>, Vec<Tensor<f32>>))| {
        let mut rng = seed::rng(seed::derive(dropout_seed, i as u64));
        let rng: Option<&mut dyn RngCore> = if use_dropout { Some(&mut rng) } else { None };
        item_grad(model, m, t, weight, rng)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    items.iter().enumerate().map(run).collect()
}

type ParamGrads = Vec<(ParamId, Tensor<f32>)>;

fn add_grads(mut a: ParamGrads, b: ParamGrads) -> ParamGrads {
    for (id, gb) in b {
        match a.iter_mut().find(|(ia, _)| *ia == id) {
            Some((_, ga)) => ga.add_assign(&gb),
            None => a.push((id, gb)),
        }
    }
    a
}

/// Sums per-item gradients. `ordered` folds left to right, so the result
/// does not depend on thread scheduling; otherwise the sum is a parallel
/// tree reduction.
fn reduce_grads(grads: Vec<Gradients<f32>>, ordered: bool) -> ParamGrads {
    let lists = grads.into_iter().map(Gradients::into_params);
    if ordered {
        return lists.fold(Vec::new(), add_grads);
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        lists.collect::<Vec<_>>().into_par_iter().reduce(Vec::new, add_grads)
    }
    #[cfg(not(feature = "parallel"))]
    lists.fold(Vec::new(), add_grads)
}

fn emit(log: &mut RunLog, row: LogRow, sink: &mut Option<&mut dyn Write>) -> Result<(), TrainError> {
    if let Some(w) = sink.as_mut() {
        serde_json::to_writer(&mut *w, &row)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    log.rows.push(row);
    Ok(())
}

/// Trains a fresh model on `train_set`, evaluating on `val_set` every
/// `eval_every` steps and after the last step.
pub fn train(
    cfg: &TrainConfig,
    train_set: &DataSource<'_>,
    val_set: &DataSource<'_>,
    mut sinks: TrainSinks<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    train_set.check_profile(&cfg.profile)?;
    val_set.check_profile(&cfg.profile)?;
    if train_set.manifest().subdataset().sources != cfg.subdataset.sources {
        return Err(TrainError::Config(format!(
            "training set has {} sources per mixture, config expects {}",
            train_set.manifest().subdataset().sources,
            cfg.subdataset.sources
        )));
    }
    if let Some(dir) = sinks.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let card = ModelCard::new(cfg);
    let config_text = card.to_json();
    let mut model = SttModel::<f32>::new(cfg.stt.clone(), seed::derive(cfg.seed, 0))?;
    let mut adam = AdamState::new(model.params(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let order = batch_order(train_set.len(), cfg.max_steps, cfg.batch_size, seed::derive(cfg.seed, 1));
    let dropout_root = seed::derive(cfg.seed, 2);
    let started = Instant::now();
    let mut log = RunLog::default();
    let snapshot = |model: &SttModel<f32>| Checkpoint::from_params(config_text.clone(), model.params());
    let mut best = (f64::INFINITY, snapshot(&model));
    let mut last_good = snapshot(&model);

    let mut evaluate_now = |model: &SttModel<f32>, step: usize, log: &mut RunLog, sinks: &mut TrainSinks<'_>| {
        let report = evaluate_model(model, &card, val_set)?;
        let row = LogRow::Eval {
            step,
            val_loss: report.model_loss,
            baseline_loss: report.baseline_loss,
            wall_s: started.elapsed().as_secs_f64(),
        };
        emit(log, row, &mut sinks.log)?;
        if !report.model_loss.is_finite() {
            return Err(TrainError::Diverged { step, last_good: None });
        }
        if report.model_loss < best.0 {
            best = (report.model_loss, snapshot(model));
            if let Some(dir) = sinks.checkpoint_dir {
                save_checkpoint(&best.1, &dir.join("best.ckpt"))?;
            }
        }
        Ok::<_, TrainError>(())
    };

    std::thread::scope(|scope| -> Result<(), TrainError> {
        let (tx, rx) = mpsc::sync_channel::<Batch>(2);
        let stft = cfg.profile.stft;
        let order = &order;
        scope.spawn(move || {
            for idx in order {
                let batch = idx
                    .iter()
                    .map(|&i| train_set.example(i, &stft).and_then(|e| e.tensors()))
                    .collect::<Result<Vec<_>, _>>();
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in 0..cfg.max_steps {
            let items = rx.recv().map_err(|_| TrainError::Config("batch producer stopped".into()))??;
            let grads = batch_grads(&model, &items, seed::derive(dropout_root, step as u64)).map_err(|e| match e {
                TrainError::Diverged { .. } => TrainError::Diverged { step, last_good: Some(Box::new(last_good.clone())) },
                other => other,
            })?;
            let (losses, grads): (Vec<f64>, Vec<_>) = grads.into_iter().unzip();
            let loss = losses.iter().sum::<f64>() / items.len() as f64;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, last_good: Some(Box::new(last_good.clone())) });
            }
            for (id, g) in reduce_grads(grads, cfg.deterministic) {
                model.params_mut().accumulate_one(id, &g)?;
            }
            adam.step(model.params_mut()).map_err(|e| match e {
                AutodiffError::Numeric(_) => TrainError::Diverged { step, last_good: Some(Box::new(last_good.clone())) },
                other => other.into(),
            })?;
            emit(&mut log, LogRow::Step { step, loss, wall_s: started.elapsed().as_secs_f64() }, &mut sinks.log)?;
            let done = step + 1 == cfg.max_steps;
            if (step + 1) % cfg.eval_every == 0 || done {
                evaluate_now(&model, step, &mut log, &mut sinks).map_err(|e| match e {
                    TrainError::Diverged { step, .. } => {
                        TrainError::Diverged { step, last_good: Some(Box::new(last_good.clone())) }
                    }
                    other => other,
                })?;
                last_good = snapshot(&model);
            }
        }
        drop(rx);
        Ok(())
    })?;
    if cfg.max_steps == 0 {
        evaluate_now(&model, 0, &mut log, &mut sinks)?;
    }
    drop(evaluate_now);
    let last = snapshot(&model);
    if let Some(dir) = sinks.checkpoint_dir {
        save_checkpoint(&last, &dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome { best: best.1, best_val_loss: best.0, last, log })
}

/// Splits `clip` into model-length tiles (the last zero-padded), separates
/// each and concatenates the per-source results, trimmed to the input length.
pub fn separate_clip(loaded: &LoadedModel, clip: &PcmClip) -> Result<Vec<PcmClip>, TrainError> {
    let card = &loaded.card;
    if clip.sample_rate() != card.sample_rate {
        return Err(TrainError::Rate { expected: card.sample_rate, got: clip.sample_rate() });
    }
    let tile = card.track_len();
    let samples = clip.samples_f64();
    let s = card.stt.sources;
    let mut outs: Vec<Vec<f64>> = vec![Vec::with_capacity(samples.len()); s];
    for chunk in samples.chunks(tile) {
        let mut padded = chunk.to_vec();
        padded.resize(tile, 0.0);
        let spec = stft_samples(&padded, card.sample_rate, &card.stft)?;
        for (k, pred) in loaded.model.predict(&spec)?.iter().enumerate() {
            let wave = istft_samples(pred)?;
            outs[k].extend_from_slice(&wave[..chunk.len()]);
        }
    }
    outs.into_iter()
        .map(|v| Ok(PcmClip::clamped(v.into_iter().map(|x| x as f32).collect(), card.sample_rate)?))
        .collect()
}

/// Reads `input`, separates it and writes `source_<k>.wav` into `out_dir`.
pub fn separate(ck: &Checkpoint, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    let loaded = LoadedModel::from_checkpoint(ck)?;
    let clip = read_wav(input)?;
    let sources = separate_clip(&loaded, &clip)?;
    std::fs::create_dir_all(out_dir)?;
    sources
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let path = out_dir.join(format!("source_{k}.wav"));
            write_wav(c, &path)?;
            Ok(path)
        })
        .collect()
}
