//! `dataset.toml`: how to rebuild the corpus behind a set of manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use specsep::audio::{gen_synthetic_corpus, load_corpus_dir, Corpus, CorpusSpec, Fold};
use specsep::forge::{read_manifest, DatasetManifest, Partition, SubdatasetId};
use specsep::train::{DataSource, Profile};

pub const DESCRIPTOR: &str = "dataset.toml";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic { spec: CorpusSpec, seed: u64 },
    Dir { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub corpus: CorpusSource,
    pub profile: Profile,
    pub master_seed: u64,
    /// Whether record audio was written next to the manifests.
    pub materialized: bool,
}

impl DatasetDescriptor {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(DESCRIPTOR);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        fs::write(root.join(DESCRIPTOR), toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let corpus = match &self.corpus {
            CorpusSource::Synthetic { spec, seed } => gen_synthetic_corpus(spec, *seed)?,
            CorpusSource::Dir { path } => load_corpus_dir(path)?,
        };
        if corpus.sample_rate() != self.profile.sample_rate {
            bail!("corpus is {} Hz, profile expects {} Hz", corpus.sample_rate(), self.profile.sample_rate);
        }
        Ok(corpus)
    }
}

/// Loaded manifests of one dataset root.
pub struct Dataset {
    pub root: PathBuf,
    pub descriptor: DatasetDescriptor,
    pub corpus: Corpus,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let descriptor = DatasetDescriptor::read(root)?;
        let corpus = descriptor.corpus()?;
        Ok(Self { root: root.to_path_buf(), descriptor, corpus })
    }

    pub fn manifest_path(&self, partition: Partition, sources: usize, fold: Fold) -> PathBuf {
        self.root.join(partition.as_str()).join(sources.to_string()).join(fold.as_str()).join("manifest.jsonl")
    }

    pub fn manifest(&self, partition: Partition, sources: usize, fold: Fold) -> Result<DatasetManifest> {
        let path = self.manifest_path(partition, sources, fold);
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let manifest = read_manifest(file)?;
        let want = SubdatasetId::new(partition, sources, fold);
        if manifest.subdataset() != want {
            bail!("{} holds {}, expected {want}", path.display(), manifest.subdataset());
        }
        if manifest.header.corpus_hash != self.corpus.digest() {
            bail!("{} was built from a different corpus", path.display());
        }
        Ok(manifest)
    }

    pub fn source<'a>(&'a self, manifest: &'a DatasetManifest) -> DataSource<'a> {
        if self.descriptor.materialized {
            DataSource::on_disk(manifest, &self.root)
        } else {
            DataSource::rendered(manifest, &self.corpus)
        }
    }
}
