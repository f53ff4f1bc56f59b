//! Labeled multivariate time-series datasets and their on-disk formats.
//!
//! Binary layout: a `manifest.json` describing shapes, labels, folds and
//! feature names, next to a `data.bin` of little-endian f32 values stored
//! instance-major, each instance row-major T x D (row = time step). A
//! benchmark directory holds a `train/` and `test/` split plus an optional
//! `ground_truth.json` with two class-by-feature importance variants.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CafoError, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// N labeled instances, each a T x D matrix (row = time step, column = feature).
#[derive(Clone, Debug, PartialEq)]
pub struct MtsDataset {
    pub instances: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    pub folds: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl MtsDataset {
    pub fn new(
        instances: Vec<Tensor>,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        folds: Vec<usize>,
        split: Split,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self { instances, labels, feature_names, folds, split, num_classes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.instances.len();
        if self.labels.len() != n || self.folds.len() != n {
            return Err(CafoError::DataFormat(format!(
                "{} instances but {} labels / {} folds",
                n,
                self.labels.len(),
                self.folds.len()
            )));
        }
        if let Some(first) = self.instances.first() {
            let shape = first.shape().to_vec();
            if shape.len() != 2 {
                return Err(CafoError::DataFormat(format!(
                    "instances must be rank 2, got {:?}",
                    shape
                )));
            }
            for (i, inst) in self.instances.iter().enumerate() {
                if inst.shape() != shape.as_slice() {
                    return Err(CafoError::DataFormat(format!(
                        "instance {} has shape {:?}, expected {:?}",
                        i,
                        inst.shape(),
                        shape
                    )));
                }
            }
            if self.feature_names.len() != shape[1] {
                return Err(CafoError::DataFormat(format!(
                    "{} feature names for {} features",
                    self.feature_names.len(),
                    shape[1]
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(CafoError::DataFormat(format!(
                "label {} out of range for {} classes",
                bad, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Time steps per instance; 0 for an empty dataset.
    pub fn time_steps(&self) -> usize {
        self.instances.first().map_or(0, |t| t.shape()[0])
    }

    /// Feature count; falls back to the name list for an empty dataset.
    pub fn num_features(&self) -> usize {
        self.instances.first().map_or(self.feature_names.len(), |t| t.shape()[1])
    }

    /// Sorted distinct fold ids.
    pub fn fold_ids(&self) -> Vec<usize> {
        let mut ids = self.folds.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Copy of the dataset with the given feature columns removed.
    pub fn without_features(&self, removed: &[usize]) -> Result<Self> {
        let d = self.num_features();
        if let Some(&bad) = removed.iter().find(|&&j| j >= d) {
            return Err(CafoError::DataFormat(format!("feature {} out of range (D={})", bad, d)));
        }
        let keep: Vec<usize> = (0..d).filter(|j| !removed.contains(j)).collect();
        let t = self.time_steps();
        let instances = self
            .instances
            .iter()
            .map(|inst| {
                let src = inst.data();
                let mut out = Vec::with_capacity(t * keep.len());
                for row in 0..t {
                    for &j in &keep {
                        out.push(src[row * d + j]);
                    }
                }
                Tensor::from_parts(vec![t, keep.len()], out)
            })
            .collect();
        Ok(Self {
            instances,
            labels: self.labels.clone(),
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            folds: self.folds.clone(),
            split: self.split,
            num_classes: self.num_classes,
        })
    }

    /// FNV-1a over the f32 payload, labels and folds. Stable across a
    /// write/read round-trip; keys the encoding cache.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.len() as u64);
        h.write_u64(self.time_steps() as u64);
        h.write_u64(self.num_features() as u64);
        for inst in &self.instances {
            for &v in inst.data() {
                h.write_u32((v as f32).to_bits());
            }
        }
        for &y in &self.labels {
            h.write_u64(y as u64);
        }
        for &f in &self.folds {
            h.write_u64(f as u64);
        }
        h.finish()
    }
}

pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
    pub fn write_u32(&mut self, v: u32) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    pub fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    n: usize,
    t: usize,
    d: usize,
    c: usize,
    feature_names: Vec<String>,
    labels: Vec<usize>,
    folds: Vec<usize>,
    split: Split,
}

/// Write one split into `dir` as `manifest.json` + `data.bin` (f32 LE).
pub fn write_dataset(dir: &Path, ds: &MtsDataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n: ds.len(),
        t: ds.time_steps(),
        d: ds.num_features(),
        c: ds.num_classes,
        feature_names: ds.feature_names.clone(),
        labels: ds.labels.clone(),
        folds: ds.folds.clone(),
        split: ds.split,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut payload = Vec::with_capacity(ds.len() * manifest.t * manifest.d * 4);
    for inst in &ds.instances {
        for &v in inst.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join("data.bin"))?;
    f.write_all(&payload)?;
    Ok(())
}

/// Read one split from `dir`.
pub fn read_dataset(dir: &Path) -> Result<MtsDataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CafoError::MissingInput(manifest_path.display().to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(CafoError::DataFormat(format!(
            "unknown format version {}",
            manifest.version
        )));
    }
    let mut payload = Vec::new();
    fs::File::open(dir.join("data.bin"))?.read_to_end(&mut payload)?;
    let expected = manifest.n * manifest.t * manifest.d * 4;
    if payload.len() != expected {
        return Err(CafoError::DataFormat(format!(
            "manifest implies {} payload bytes, data.bin has {}",
            expected,
            payload.len()
        )));
    }
    let per_instance = manifest.t * manifest.d;
    let mut instances = Vec::with_capacity(manifest.n);
    for i in 0..manifest.n {
        let mut data = Vec::with_capacity(per_instance);
        let base = i * per_instance * 4;
        for j in 0..per_instance {
            let off = base + j * 4;
            let bits = u32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            let v = f32::from_bits(bits) as f64;
            if !v.is_finite() {
                return Err(CafoError::DataFormat(format!(
                    "non-finite value in instance {}",
                    i
                )));
            }
            data.push(v);
        }
        instances.push(Tensor::from_parts(vec![manifest.t, manifest.d], data));
    }
    MtsDataset::new(
        instances,
        manifest.labels,
        manifest.feature_names,
        manifest.folds,
        manifest.split,
        manifest.c,
    )
}

/// Ingest CSV with columns `instance_id,t,label,f0..f{D-1}`; rows grouped by
/// instance with t ascending from 0. Folds are assigned round-robin in order
/// of first appearance.
pub fn read_csv(path: &Path, split: Split, num_folds: usize) -> Result<MtsDataset> {
    let text = fs::read_to_string(path)
        .map_err(|_| CafoError::MissingInput(path.display().to_string()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CafoError::DataFormat("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[0] != "instance_id" || cols[1] != "t" || cols[2] != "label" {
        return Err(CafoError::DataFormat(
            "CSV header must start with instance_id,t,label".into(),
        ));
    }
    let d = cols.len() - 3;
    for (j, col) in cols[3..].iter().enumerate() {
        let want = format!("f{}", j);
        if *col != want {
            return Err(CafoError::DataFormat(format!(
                "missing or misplaced feature column {} (found {:?})",
                want, col
            )));
        }
    }
    let feature_names: Vec<String> = (0..d).map(|j| format!("f{}", j)).collect();

    struct Building {
        label: usize,
        rows: Vec<Vec<f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut current: Option<(String, Building)> = None;
    let mut finished: Vec<(String, Building)> = Vec::new();

    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(CafoError::DataFormat(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        let t: usize = fields[1]
            .parse()
            .map_err(|_| CafoError::DataFormat(format!("line {}: bad t", lineno + 2)))?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| CafoError::DataFormat(format!("line {}: bad label", lineno + 2)))?;
        let mut row = Vec::with_capacity(d);
        for (j, raw) in fields[3..].iter().enumerate() {
            let v: f64 = raw.parse().map_err(|_| {
                CafoError::DataFormat(format!("line {}: bad value in f{}", lineno + 2, j))
            })?;
            if !v.is_finite() {
                return Err(CafoError::DataFormat(format!(
                    "line {}: non-finite value in f{}",
                    lineno + 2,
                    j
                )));
            }
            row.push(v);
        }
        match &mut current {
            Some((cur_id, b)) if *cur_id == id => {
                if t != b.rows.len() {
                    return Err(CafoError::DataFormat(format!(
                        "instance {}: t must ascend 0..T-1, got {} at row {}",
                        id,
                        t,
                        b.rows.len()
                    )));
                }
                if label != b.label {
                    return Err(CafoError::DataFormat(format!(
                        "instance {}: inconsistent label",
                        id
                    )));
                }
                b.rows.push(row);
            }
            _ => {
                if t != 0 {
                    return Err(CafoError::DataFormat(format!(
                        "instance {}: first row must have t=0",
                        id
                    )));
                }
                if order.contains(&id) {
                    return Err(CafoError::DataFormat(format!(
                        "instance {}: rows are not grouped",
                        id
                    )));
                }
                if let Some(done) = current.take() {
                    finished.push(done);
                }
                order.push(id.clone());
                current = Some((id, Building { label, rows: vec![row] }));
            }
        }
    }
    if let Some(done) = current.take() {
        finished.push(done);
    }
    if finished.is_empty() {
        return Err(CafoError::DataFormat("CSV contains no data rows".into()));
    }
    let t = finished[0].1.rows.len();
    let mut instances = Vec::with_capacity(finished.len());
    let mut labels = Vec::with_capacity(finished.len());
    for (id, b) in &finished {
        if b.rows.len() != t {
            return Err(CafoError::DataFormat(format!(
                "instance {}: {} time steps, expected {}",
                id,
                b.rows.len(),
                t
            )));
        }
        let mut data = Vec::with_capacity(t * d);
        for row in &b.rows {
            data.extend_from_slice(row);
        }
        instances.push(Tensor::from_parts(vec![t, d], data));
        labels.push(b.label);
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let nf = num_folds.max(1);
    let folds = (0..instances.len()).map(|i| i % nf).collect();
    MtsDataset::new(instances, labels, feature_names, folds, split, num_classes)
}

/// Two C x D binary importance matrices; a prediction is scored against both
/// and the better-matching variant is reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    pub variant_a: Vec<Vec<bool>>,
    pub variant_b: Vec<Vec<bool>>,
}

impl GroundTruthMask {
    pub fn validate(&self) -> Result<()> {
        if self.variant_a.is_empty() || self.variant_a.len() != self.variant_b.len() {
            return Err(CafoError::DataFormat("ground truth variants must match in shape".into()));
        }
        let d = self.variant_a[0].len();
        for row in self.variant_a.iter().chain(&self.variant_b) {
            if row.len() != d {
                return Err(CafoError::DataFormat("ragged ground truth row".into()));
            }
            if !row.iter().any(|&v| v) || row.iter().all(|&v| v) {
                return Err(CafoError::DataFormat(
                    "each ground truth row needs an important and an unimportant feature".into(),
                ));
            }
        }
        if self.variant_a == self.variant_b {
            return Err(CafoError::DataFormat("ground truth variants must differ".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CafoError::MissingInput(path.display().to_string()));
        }
        let gt: Self = serde_json::from_slice(&fs::read(path)?)?;
        gt.validate()?;
        Ok(gt)
    }
}

/// A benchmark on disk: train and test splits plus optional ground truth.
pub struct Benchmark {
    pub train: MtsDataset,
    pub test: MtsDataset,
    pub ground_truth: Option<GroundTruthMask>,
}

impl Benchmark {
    pub fn save(&self, root: &Path) -> Result<()> {
        write_dataset(&root.join("train"), &self.train)?;
        write_dataset(&root.join("test"), &self.test)?;
        if let Some(gt) = &self.ground_truth {
            gt.save(&root.join("ground_truth.json"))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let train = read_dataset(&root.join("train"))?;
        let test = read_dataset(&root.join("test"))?;
        let gt_path = root.join("ground_truth.json");
        let ground_truth = if gt_path.exists() {
            Some(GroundTruthMask::load(&gt_path)?)
        } else {
            None
        };
        Ok(Self { train, test, ground_truth })
    }
}
