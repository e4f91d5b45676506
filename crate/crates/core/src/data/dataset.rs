//! Reading a generated dataset directory back into batches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::sat::SatTensor;
use crate::error::{Error, Result};
use crate::loss::SegTargets;
use crate::tensor::{Shape4, Tensor4};

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", no + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SegBatch {
    pub images: Tensor4<f32>,
    pub targets: SegTargets,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    classes: usize,
    size: usize,
    count: usize,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.txt");
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", meta_path.display())))?;
        let kv = parse_kv(&text)?;
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Data(format!("meta.txt lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::Data(format!("meta.txt: `{k}` is not an integer")))
        };
        Ok(Dataset {
            dir: dir.to_path_buf(),
            classes: get("classes")?,
            size: get("size")?,
            count: get("count")?,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Image `(3 * S * S)` and label map `(S * S)` of one sample.
    pub fn load(&self, index: usize) -> Result<(Vec<f32>, Vec<u8>)> {
        if index >= self.count {
            return Err(Error::Data(format!("sample {index} out of range (count {})", self.count)));
        }
        let s = self.size;
        let img = SatTensor::read(&self.dir.join(format!("images/{index:06}.sat")))?;
        if img.dims != [3, s, s] {
            return Err(Error::Data(format!("image {index} has dims {:?}, expected [3, {s}, {s}]", img.dims)));
        }
        let img = match img.data {
            super::sat::SatData::F32(d) => d,
            _ => return Err(Error::Data(format!("image {index} is not f32"))),
        };
        let lab = SatTensor::read(&self.dir.join(format!("labels/{index:06}.sat")))?;
        if lab.dims != [s, s] {
            return Err(Error::Data(format!("labels {index} have dims {:?}, expected [{s}, {s}]", lab.dims)));
        }
        let lab = lab.into_u8()?;
        if let Some(&bad) = lab.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Data(format!("labels {index} contain {bad}, class count is {}", self.classes)));
        }
        Ok((img, lab))
    }

    pub fn load_batch(&self, indices: &[usize]) -> Result<SegBatch> {
        let s = self.size;
        let mut images = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            let (img, lab) = self.load(i)?;
            images.extend(img);
            labels.extend(lab);
        }
        Ok(SegBatch {
            images: Tensor4::new(Shape4::new(indices.len(), 3, s, s), images)?,
            targets: SegTargets::new(labels, indices.len(), s, s, self.classes, None)?,
        })
    }

    /// Stored `(count, C)` presence table.
    pub fn presence(&self) -> Result<Vec<u8>> {
        let t = SatTensor::read(&self.dir.join("presence.sat"))?;
        if t.dims != [self.count, self.classes] {
            return Err(Error::Data(format!("presence dims {:?} do not match dataset", t.dims)));
        }
        t.into_u8()
    }
}
