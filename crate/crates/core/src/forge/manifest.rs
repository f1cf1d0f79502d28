//! Line-delimited JSON manifests and the on-disk audio layout
//! `<root>/<partition>/<s>/<fold>/<record_id>/{mixture,source_k}.wav`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ForgeError, MixParams, MixtureRecord, Placement, SubdatasetId};
use crate::audio::{read_wav, write_wav, Corpus};

/// First line of a manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub subdataset: SubdatasetId,
    pub master_seed: u64,
    pub corpus_hash: String,
    pub sample_rate: u32,
    pub mix: MixParams,
    pub count: usize,
}

/// One manifest line: everything needed to re-render a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub record_id: usize,
    pub seed: u64,
    pub sources: Vec<Placement>,
    pub clamp_count: usize,
}

pub fn write_manifest(manifest: &DatasetManifest, w: impl Write) -> Result<(), ForgeError> {
    let mut w = BufWriter::new(w);
    serde_json::to_writer(&mut w, &manifest.header)?;
    w.write_all(b"\n")?;
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(r: impl Read) -> Result<DatasetManifest, ForgeError> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or_else(|| ForgeError::Manifest("empty manifest".into()))??;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<RecordMeta>(&line)?);
    }
    Ok(DatasetManifest::from_records(header, records))
}

impl DatasetManifest {
    /// Directory holding this subdataset under `root`.
    pub fn dir(&self, root: &Path) -> PathBuf {
        let id = self.header.subdataset;
        root.join(id.partition.as_str()).join(id.sources.to_string()).join(id.fold.as_str())
    }

    pub fn record_dir(&self, root: &Path, record_id: usize) -> PathBuf {
        self.dir(root).join(format!("{record_id:06}"))
    }

    /// Reads a record's audio back from the on-disk layout.
    pub fn load_record(&self, root: &Path, index: usize) -> Result<MixtureRecord, ForgeError> {
        let meta = self
            .records
            .get(index)
            .ok_or_else(|| ForgeError::Manifest(format!("record index {index} out of range")))?;
        let dir = self.record_dir(root, meta.record_id);
        let mixture = read_wav(dir.join("mixture.wav"))?;
        let sources = (0..meta.sources.len())
            .map(|k| read_wav(dir.join(format!("source_{k}.wav"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MixtureRecord {
            id: meta.record_id,
            seed: meta.seed,
            placements: meta.sources.clone(),
            mixture,
            sources,
            clamp_count: meta.clamp_count,
        })
    }
}

/// Renders every record and writes the manifest plus audio under `root`.
/// Returns the manifest path.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, corpus: &Corpus) -> Result<PathBuf, ForgeError> {
    let dir = manifest.dir(root);
    fs::create_dir_all(&dir)?;
    for rec in manifest.stream(corpus) {
        let rec = rec?;
        let rdir = manifest.record_dir(root, rec.id);
        fs::create_dir_all(&rdir)?;
        write_wav(&rec.mixture, rdir.join("mixture.wav"))?;
        for (k, s) in rec.sources.iter().enumerate() {
            write_wav(s, rdir.join(format!("source_{k}.wav")))?;
        }
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(manifest, fs::File::create(&path)?)?;
    Ok(path)
}
