//! JSON-lines dataset index and an in-memory loader that keeps all clips
//! resident (desk-scale datasets are a few hundred megabytes at most).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{wav, Waveform};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub class: u32,
    pub device: u32,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub samples: Vec<SampleMeta>,
}

impl DatasetIndex {
    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let mut f = fs::File::create(self.root.join(INDEX_FILE))?;
        for s in &self.samples {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let file = fs::File::open(&path)
            .map_err(|e| Error::Input(format!("cannot open {}: {}", path.display(), e)))?;
        let mut samples = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line)?);
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            samples,
        })
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.class as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Dataset with every waveform resident in memory.
pub struct LoadedDataset {
    pub index: DatasetIndex,
    waves: HashMap<u64, Waveform>,
    by_id: HashMap<u64, usize>,
}

impl LoadedDataset {
    pub fn load(index: DatasetIndex) -> Result<Self> {
        let mut waves = HashMap::new();
        let mut by_id = HashMap::new();
        for (i, s) in index.samples.iter().enumerate() {
            let w = wav::read_wav(&index.root.join(&s.file))?;
            waves.insert(s.id, w);
            by_id.insert(s.id, i);
        }
        Ok(LoadedDataset {
            index,
            waves,
            by_id,
        })
    }

    /// In-memory dataset, handy for tests.
    pub fn from_parts(samples: Vec<SampleMeta>, waves: Vec<Waveform>) -> Result<Self> {
        if samples.len() != waves.len() {
            return Err(Error::Dimension("samples and waveforms differ in length".into()));
        }
        let mut map = HashMap::new();
        let mut by_id = HashMap::new();
        for (i, (s, w)) in samples.iter().zip(waves).enumerate() {
            map.insert(s.id, w);
            by_id.insert(s.id, i);
        }
        Ok(LoadedDataset {
            index: DatasetIndex {
                root: PathBuf::new(),
                samples,
            },
            waves: map,
            by_id,
        })
    }

    pub fn wave(&self, id: u64) -> Result<&Waveform> {
        self.waves
            .get(&id)
            .ok_or_else(|| Error::Data(format!("no sample with id {}", id)))
    }

    pub fn meta(&self, id: u64) -> Result<&SampleMeta> {
        self.by_id
            .get(&id)
            .map(|&i| &self.index.samples[i])
            .ok_or_else(|| Error::Data(format!("no sample with id {}", id)))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.index.ids()
    }

    pub fn len(&self) -> usize {
        self.index.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.samples.is_empty()
    }
}
