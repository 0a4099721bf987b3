//! Line-delimited sample files with a JSON schema sidecar.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prompt_kb::{Sample, TaskSchema};

/// Labeled (or unlabeled) samples sharing one schema.
#[derive(Debug, Clone)]
pub struct FewShotDataset {
    schema: TaskSchema,
    samples: Vec<Sample>,
}

impl FewShotDataset {
    pub fn new(schema: TaskSchema, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            s.validate(&schema)?;
        }
        Ok(FewShotDataset { schema, samples })
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }

    /// Gold labels, failing if any sample is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::Validation(format!("sample `{}` has no label", s.id)))
            })
            .collect()
    }

    /// Samples of class `c`.
    pub fn class_samples(&self, c: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.label == Some(c))
    }

    /// Same inputs with labels removed.
    pub fn without_labels(&self) -> FewShotDataset {
        FewShotDataset {
            schema: self.schema.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    label: None,
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Subset by sample indices.
    pub fn subset(&self, indices: &[usize]) -> FewShotDataset {
        FewShotDataset {
            schema: self.schema.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn from_reader(schema: TaskSchema, reader: impl BufRead) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            sample.validate(&schema).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            samples.push(sample);
        }
        Ok(FewShotDataset { schema, samples })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Stratified K-shot sample: `k` examples per class, chosen with `seed`.
    /// Returns the sampled set and the remainder.
    pub fn sample_k_per_class(&self, k: usize, seed: u64) -> Result<(FewShotDataset, FewShotDataset)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::new();
        for c in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == Some(c))
                .collect();
            if idx.len() < k {
                return Err(Error::Validation(format!(
                    "class {c} has {} samples, {k} requested",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            picked.extend_from_slice(&idx[..k]);
        }
        picked.sort_unstable();
        let rest: Vec<usize> = (0..self.samples.len())
            .filter(|i| picked.binary_search(i).is_err())
            .collect();
        Ok((self.subset(&picked), self.subset(&rest)))
    }
}

/// Default schema location: `schema.json` next to the data file.
pub fn default_schema_path(data: &Path) -> PathBuf {
    data.parent()
        .unwrap_or_else(|| Path::new("."))
        .join("schema.json")
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<TaskSchema> {
    let text = std::fs::read_to_string(path.as_ref())?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!(
        "schema {}: {e}",
        path.as_ref().display()
    )))
}

pub fn load_dataset(data: impl AsRef<Path>, schema: &TaskSchema) -> Result<FewShotDataset> {
    let file = std::fs::File::open(data.as_ref())?;
    FewShotDataset::from_reader(schema.clone(), std::io::BufReader::new(file))
}
