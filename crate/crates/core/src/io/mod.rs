//! Volume records, the on-disk dataset layout, and the synthetic dataset
//! generator.

pub mod spv;
mod synth;

pub use spv::{read_image, read_labels, read_volume, write_volume, SpvVolume};
pub use synth::{downsample_record, generate_record, generate_synthetic_dataset, SynthDataConfig, INTENSITY_QUANTUM};

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const TUMOR: u8 = 2;

/// An intensity volume with its label volume, both `[x, y, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub image: Tensor<f32>,
    pub labels: Tensor<u8>,
}

impl VolumeRecord {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, labels: Tensor<u8>) -> Result<Self> {
        let rec = VolumeRecord {
            id: id.into(),
            image,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.shape() != self.labels.shape() || self.image.ndim() != 3 {
            return Err(Error::ShapeMismatch {
                what: format!("record `{}` image vs labels", self.id),
                expected: self.image.shape().to_vec(),
                got: self.labels.shape().to_vec(),
            });
        }
        if let Some(l) = self.labels.data().iter().find(|&&l| l > TUMOR) {
            return Err(Error::Config(format!("record `{}` has label {l}", self.id)));
        }
        Ok(())
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.data().iter().filter(|&&l| l == label).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub const MANIFEST: &str = "manifest.tsv";

/// A directory of `<id>.img.spv` / `<id>.seg.spv` pairs listed in a
/// tab-separated manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    entries: Vec<(String, Split)>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected id<TAB>split", path.display(), n + 1)))?;
            let split = match split.trim() {
                "train" => Split::Train,
                "val" => Split::Val,
                other => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown split `{other}`",
                        path.display(),
                        n + 1
                    )))
                }
            };
            entries.push((id.to_string(), split));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    /// Writes `records` and a manifest into `dir`, creating it if needed.
    pub fn create(dir: &Path, records: &[(VolumeRecord, Split)]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (rec, split) in records {
            rec.validate()?;
            write_record(dir, rec)?;
            manifest.push_str(&format!("{}\t{}\n", rec.id, split.name()));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Dataset::open(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[(String, Split)] {
        &self.entries
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn load(&self, id: &str) -> Result<VolumeRecord> {
        let image = read_image(&self.dir.join(format!("{id}.img.spv")))?;
        let labels = read_labels(&self.dir.join(format!("{id}.seg.spv")))?;
        VolumeRecord::new(id, image, labels)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VolumeRecord>> {
        self.ids(split).into_iter().map(|id| self.load(id)).collect()
    }
}

pub fn write_record(dir: &Path, rec: &VolumeRecord) -> Result<()> {
    write_volume(&dir.join(format!("{}.img.spv", rec.id)), &rec.image)?;
    write_volume(&dir.join(format!("{}.seg.spv", rec.id)), &rec.labels)?;
    Ok(())
}
