use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_wav, AudioError, Fold, PcmClip};
use crate::seed;

/// Peak level every synthetic clip is normalized to.
const SYNTH_PEAK: f64 = 0.9;

/// Parameters for [`gen_synthetic_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Clips per class in (train, validation, test).
    pub fold_sizes: [usize; 3],
    /// Clip duration bounds in seconds.
    pub duration_range: [f64; 2],
    pub sample_rate: u32,
    /// Length of the mixtures the corpus will feed; clips may not exceed it.
    #[serde(default = "default_mixture_seconds")]
    pub mixture_seconds: f64,
}

fn default_mixture_seconds() -> f64 {
    2.0
}

impl CorpusSpec {
    /// 25 classes × 60 clips split 40/10/10, 0.25–1 s at 44.1 kHz.
    pub fn studio() -> Self {
        Self {
            n_classes: 25,
            n_per_class: 60,
            fold_sizes: [40, 10, 10],
            duration_range: [0.25, 1.0],
            sample_rate: 44_100,
            mixture_seconds: 2.0,
        }
    }

    /// Small corpus at 8 kHz for one-second mixtures.
    pub fn desk() -> Self {
        Self {
            n_classes: 10,
            n_per_class: 22,
            fold_sizes: [12, 5, 5],
            duration_range: [0.25, 1.0],
            sample_rate: 8_000,
            mixture_seconds: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        let cfg = |m: String| Err(AudioError::Config(m));
        if self.n_classes == 0 || self.n_per_class == 0 {
            return cfg("corpus needs at least one class and one clip per class".into());
        }
        if self.fold_sizes.iter().sum::<usize>() != self.n_per_class {
            return cfg(format!(
                "fold sizes {:?} do not sum to n_per_class {}",
                self.fold_sizes, self.n_per_class
            ));
        }
        if self.sample_rate == 0 {
            return cfg("sample_rate must be positive".into());
        }
        let [lo, hi] = self.duration_range;
        if !(lo > 0.0 && lo <= hi && hi <= self.mixture_seconds) {
            return cfg(format!(
                "duration_range [{lo}, {hi}] must lie in (0, {}]",
                self.mixture_seconds
            ));
        }
        Ok(())
    }
}

/// Parametric sound families the synthetic classes cycle through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoundFamily {
    Tone,
    Chirp,
    AmTone,
    NoiseBurst,
    PulseTrain,
}

impl SoundFamily {
    pub fn for_class(class_index: usize) -> Self {
        match class_index % 5 {
            0 => Self::Tone,
            1 => Self::Chirp,
            2 => Self::AmTone,
            3 => Self::NoiseBurst,
            _ => Self::PulseTrain,
        }
    }
}

/// All clips of one class, split by fold.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassClips {
    pub class_id: u32,
    folds: [Vec<PcmClip>; 3],
}

impl ClassClips {
    pub fn new(class_id: u32, train: Vec<PcmClip>, val: Vec<PcmClip>, test: Vec<PcmClip>) -> Self {
        Self { class_id, folds: [train, val, test] }
    }

    pub fn fold(&self, fold: Fold) -> &[PcmClip] {
        &self.folds[fold.index()]
    }

    pub fn len(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source clips grouped by class, each class split into disjoint folds.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    classes: Vec<ClassClips>,
    sample_rate: u32,
}

impl Corpus {
    pub fn new(classes: Vec<ClassClips>) -> Result<Self, AudioError> {
        let rate = classes
            .iter()
            .flat_map(|c| Fold::ALL.into_iter().flat_map(move |f| c.fold(f)))
            .map(PcmClip::sample_rate)
            .next()
            .ok_or_else(|| AudioError::Config("corpus has no clips".into()))?;
        for c in &classes {
            for f in Fold::ALL {
                if let Some(bad) = c.fold(f).iter().find(|clip| clip.sample_rate() != rate) {
                    return Err(AudioError::Config(format!(
                        "class {} mixes sample rates {} and {}",
                        c.class_id,
                        rate,
                        bad.sample_rate()
                    )));
                }
            }
        }
        Ok(Self { classes, sample_rate: rate })
    }

    pub fn classes(&self) -> &[ClassClips] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn class(&self, class_id: u32) -> Option<&ClassClips> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn clip(&self, class_id: u32, fold: Fold, index: usize) -> Option<&PcmClip> {
        self.class(class_id).and_then(|c| c.fold(fold).get(index))
    }

    pub fn total_clips(&self) -> usize {
        self.classes.iter().map(ClassClips::len).sum()
    }

    /// SHA-256 over class ids, fold layout and every sample's bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.sample_rate.to_le_bytes());
        for c in &self.classes {
            h.update(c.class_id.to_le_bytes());
            for f in Fold::ALL {
                let clips = c.fold(f);
                h.update((clips.len() as u64).to_le_bytes());
                for clip in clips {
                    h.update((clip.len() as u64).to_le_bytes());
                    for s in clip.samples() {
                        h.update(s.to_le_bytes());
                    }
                }
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Generates a license-free corpus of parametric sounds. Class `k` (id `k+1`)
/// uses family `k mod 5` with a class-specific base frequency; clips within a
/// class vary pitch, envelope and family-specific parameters. The result is
/// a pure function of `(spec, seed)`.
pub fn gen_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus, AudioError> {
    spec.validate()?;
    let rate = spec.sample_rate as f64;
    let f_lo = 150.0_f64.min(0.1 * rate);
    let f_hi = 0.3 * rate;
    let mut classes = Vec::with_capacity(spec.n_classes);
    for k in 0..spec.n_classes {
        let frac = if spec.n_classes > 1 { k as f64 / (spec.n_classes - 1) as f64 } else { 0.5 };
        let base = f_lo * (f_hi / f_lo).powf(frac);
        let family = SoundFamily::for_class(k);
        let class_id = k as u32 + 1;
        let mut folds: [Vec<PcmClip>; 3] = Default::default();
        let mut clip_no = 0u64;
        for fold in Fold::ALL {
            for _ in 0..spec.fold_sizes[fold.index()] {
                let mut rng = seed::rng(seed::derive_path(seed, &[k as u64, clip_no]));
                clip_no += 1;
                let samples = synth_clip(&mut rng, family, base, spec);
                let clip = PcmClip::new(samples, spec.sample_rate)?.with_provenance(class_id, fold);
                folds[fold.index()].push(clip);
            }
        }
        let [tr, vl, te] = folds;
        classes.push(ClassClips::new(class_id, tr, vl, te));
    }
    Corpus::new(classes)
}

fn synth_clip(rng: &mut impl Rng, family: SoundFamily, base: f64, spec: &CorpusSpec) -> Vec<f32> {
    let rate = spec.sample_rate as f64;
    let nyquist = 0.5 * rate;
    let [lo, hi] = spec.duration_range;
    let dur = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let n = ((dur * rate).round() as usize).max(1);
    let f0 = (base * rng.gen_range(0.85..1.15)).min(0.45 * rate);
    let attack = rng.gen_range(0.005..0.03);
    let release = rng.gen_range(0.02..0.2) * dur;
    let phase0 = rng.gen_range(0.0..2.0 * PI);

    let mut out = vec![0.0f64; n];
    match family {
        SoundFamily::Tone => {
            let h2 = rng.gen_range(0.0..0.4);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / rate;
                let mut v = (2.0 * PI * f0 * t + phase0).sin();
                if 2.0 * f0 < nyquist {
                    v += h2 * (4.0 * PI * f0 * t).sin();
                }
                *o = v;
            }
        }
        SoundFamily::Chirp => {
            let f1 = (f0 * rng.gen_range(1.5..3.0)).min(0.45 * rate);
            let sweep = (f1 - f0) / dur;
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / rate;
                *o = (2.0 * PI * (f0 * t + 0.5 * sweep * t * t) + phase0).sin();
            }
        }
        SoundFamily::AmTone => {
            let fm = rng.gen_range(3.0..12.0);
            let depth = rng.gen_range(0.5..1.0);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / rate;
                let am = 1.0 - depth * 0.5 * (1.0 - (2.0 * PI * fm * t).cos());
                *o = am * (2.0 * PI * f0 * t + phase0).sin();
            }
        }
        SoundFamily::NoiseBurst => {
            // RBJ band-pass biquad over white noise.
            let q = rng.gen_range(2.0..6.0);
            let w0 = 2.0 * PI * f0 / rate;
            let alpha = w0.sin() / (2.0 * q);
            let a0 = 1.0 + alpha;
            let (b0, b2) = (alpha / a0, -alpha / a0);
            let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
            let decay = rng.gen_range(3.0..12.0) / dur;
            let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
            for (i, o) in out.iter_mut().enumerate() {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
                x2 = x1;
                x1 = x;
                y2 = y1;
                y1 = y;
                *o = y * (-decay * i as f64 / rate).exp();
            }
        }
        SoundFamily::PulseTrain => {
            let pulse_rate = rng.gen_range(5.0..40.0);
            let period = (rate / pulse_rate).max(1.0);
            let ring = rng.gen_range(60.0..200.0);
            for (i, o) in out.iter_mut().enumerate() {
                let local = (i as f64 % period) / rate;
                *o = (2.0 * PI * f0 * local).sin() * (-ring * local).exp();
            }
        }
    }

    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let rise = if attack > 0.0 { (t / attack).min(1.0) } else { 1.0 };
        let fall = if release > 0.0 { ((dur - t) / release).clamp(0.0, 1.0) } else { 1.0 };
        *o *= rise * fall;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = SYNTH_PEAK / peak;
        out.iter_mut().for_each(|v| *v *= g);
    } else {
        // Degenerate envelope (single-sample clip): emit a unit impulse.
        out[0] = SYNTH_PEAK;
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Loads a corpus laid out as `<dir>/<class_id>/<tr|vl|te>/*.wav`, with
/// files in each fold taken in lexicographic order.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Corpus, AudioError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AudioError::Io { path, source }
    };
    let mut class_dirs: Vec<(u32, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let class_id: u32 = name
            .parse()
            .map_err(|_| AudioError::Config(format!("class directory {name:?} is not an integer id")))?;
        class_dirs.push((class_id, path));
    }
    class_dirs.sort();

    let mut classes = Vec::with_capacity(class_dirs.len());
    for (class_id, path) in class_dirs {
        let mut folds: [Vec<PcmClip>; 3] = Default::default();
        for fold in Fold::ALL {
            let fold_dir = path.join(fold.as_str());
            if !fold_dir.is_dir() {
                continue;
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&fold_dir)
                .map_err(io(&fold_dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            for f in files {
                folds[fold.index()].push(read_wav(&f)?.with_provenance(class_id, fold));
            }
        }
        let [tr, vl, te] = folds;
        classes.push(ClassClips::new(class_id, tr, vl, te));
    }
    Corpus::new(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_classes: 3,
            n_per_class: 6,
            fold_sizes: [4, 1, 1],
            duration_range: [0.25, 1.0],
            sample_rate: 8000,
            mixture_seconds: 1.0,
        }
    }

    #[test]
    fn small_corpus_counts_and_bounds() {
        let spec = small();
        let c = gen_synthetic_corpus(&spec, 1).unwrap();
        assert_eq!(c.total_clips(), 18);
        for class in c.classes() {
            assert_eq!(class.fold(Fold::Tr).len(), 4);
            assert_eq!(class.fold(Fold::Vl).len(), 1);
            assert_eq!(class.fold(Fold::Te).len(), 1);
            for f in Fold::ALL {
                for clip in class.fold(f) {
                    let d = clip.duration();
                    assert!((0.25 - 1.0 / 8000.0..=1.0 + 1.0 / 8000.0).contains(&d), "duration {d}");
                    assert_eq!(clip.class_id(), Some(class.class_id));
                    assert_eq!(clip.fold(), Some(f));
                    assert!((clip.peak() - 0.9).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn deterministic_in_spec_and_seed() {
        let a = gen_synthetic_corpus(&small(), 5).unwrap();
        let b = gen_synthetic_corpus(&small(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = gen_synthetic_corpus(&small(), 6).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn folds_share_no_clip() {
        let c = gen_synthetic_corpus(&small(), 2).unwrap();
        for class in c.classes() {
            for (i, a) in Fold::ALL.iter().enumerate() {
                for b in &Fold::ALL[i + 1..] {
                    for x in class.fold(*a) {
                        assert!(class.fold(*b).iter().all(|y| y.samples() != x.samples()));
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small();
        s.duration_range = [0.0, 1.0];
        assert!(matches!(s.validate(), Err(AudioError::Config(_))));
        let mut s = small();
        s.duration_range = [0.5, 1.5];
        assert!(s.validate().is_err());
        let mut s = small();
        s.fold_sizes = [4, 1, 2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn families_cycle() {
        assert_eq!(SoundFamily::for_class(0), SoundFamily::Tone);
        assert_eq!(SoundFamily::for_class(4), SoundFamily::PulseTrain);
        assert_eq!(SoundFamily::for_class(5), SoundFamily::Tone);
    }

    #[test]
    fn directory_round_trip() {
        let c = gen_synthetic_corpus(&small(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for class in c.classes() {
            for f in Fold::ALL {
                let d = dir.path().join(class.class_id.to_string()).join(f.as_str());
                fs::create_dir_all(&d).unwrap();
                for (i, clip) in class.fold(f).iter().enumerate() {
                    write_wav(clip, d.join(format!("{i:03}.wav"))).unwrap();
                }
            }
        }
        let loaded = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(loaded.n_classes(), 3);
        assert_eq!(loaded.total_clips(), 18);
        let a = c.clip(2, Fold::Tr, 3).unwrap();
        let b = loaded.clip(2, Fold::Tr, 3).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(b.provenance(), a.provenance());
    }
}
