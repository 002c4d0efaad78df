//! On-disk dataset: `manifest.json` plus one `.ten` file per sample field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{make_sample, Attribute, CompositeSample, Generator};
use super::trimap::Trimap;
use crate::error::{Error, Result};
use crate::seed::mix;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub fg: String,
    pub bg: String,
    pub alpha: String,
    pub image: String,
    pub trimap: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub kind: Generator,
    pub attribute: Attribute,
    pub files: SampleFiles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub samples: Vec<CompositeSample>,
}

impl Dataset {
    /// `count` samples of `size x size`; sample `i` uses generator
    /// `i mod 4` and seed `mix(seed, i)`.
    pub fn generate(count: usize, size: usize, seed: u64) -> Result<Dataset> {
        let mut entries = Vec::with_capacity(count);
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let kind = Generator::ALL[i % Generator::ALL.len()];
            let s = mix(seed, i as u64);
            let sample = make_sample(s, kind, (size, size))?;
            let id = format!("{i:05}");
            entries.push(ManifestEntry {
                files: SampleFiles {
                    fg: format!("{id}_fg.ten"),
                    bg: format!("{id}_bg.ten"),
                    alpha: format!("{id}_alpha.ten"),
                    image: format!("{id}_image.ten"),
                    trimap: format!("{id}_trimap.ten"),
                },
                id,
                seed: s,
                kind,
                attribute: sample.attribute,
            });
            samples.push(sample);
        }
        Ok(Dataset { entries, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (e, s) in self.entries.iter().zip(&self.samples) {
            s.fg.save(dir.join(&e.files.fg))?;
            s.bg.save(dir.join(&e.files.bg))?;
            s.alpha.save(dir.join(&e.files.alpha))?;
            s.image.save(dir.join(&e.files.image))?;
            s.trimap.tensor().save(dir.join(&e.files.trimap))?;
        }
        let json = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest: PathBuf = dir.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::Config(format!(
                "dataset {} has no {MANIFEST}",
                dir.display()
            )));
        }
        let entries: Vec<ManifestEntry> = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        let mut samples = Vec::with_capacity(entries.len());
        for e in &entries {
            let image = Tensor::load(dir.join(&e.files.image))?;
            let alpha = Tensor::load(dir.join(&e.files.alpha))?;
            let s = image.shape();
            if s.c() != 3 || alpha.shape() != s.with_c(1) {
                return Err(Error::Format(format!(
                    "sample {}: image {} and alpha {} do not match",
                    e.id,
                    s,
                    alpha.shape()
                )));
            }
            samples.push(CompositeSample {
                fg: Tensor::load(dir.join(&e.files.fg))?,
                bg: Tensor::load(dir.join(&e.files.bg))?,
                alpha,
                image,
                trimap: Trimap::from_tensor(Tensor::load(dir.join(&e.files.trimap))?)?,
                attribute: e.attribute,
            });
        }
        Ok(Dataset { entries, samples })
    }
}
