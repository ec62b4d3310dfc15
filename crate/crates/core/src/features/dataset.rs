use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeatureConfig;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"AFCF";
pub const FEATURE_VERSION: u16 = 1;

/// Row-major feature matrix with one 0/1 label per row (1 = arc).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    rows: Vec<f32>,
    labels: Vec<u8>,
}

/// Provenance written next to a feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub feature_config: FeatureConfig,
    pub count: usize,
    pub arc_rows: usize,
    #[serde(default)]
    pub source_manifest: Option<String>,
    #[serde(default)]
    pub profiles: Vec<String>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_parts(dim: usize, rows: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || rows.len() != dim * labels.len() {
            return Err(Error::ShapeMismatch {
                name: "feature rows".into(),
                expected: vec![labels.len(), dim],
                got: vec![rows.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { dim, rows, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn push(&mut self, row: &[f32], label: u8) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::ShapeMismatch {
                name: "feature row".into(),
                expected: vec![self.dim],
                got: vec![row.len()],
            });
        }
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        self.rows.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &FeatureSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::ShapeMismatch {
                name: "feature set".into(),
                expected: vec![self.dim],
                got: vec![other.dim],
            });
        }
        self.rows.extend_from_slice(&other.rows);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        let mut out = FeatureSet::new(self.dim);
        out.rows.reserve(indices.len() * self.dim);
        for &i in indices {
            out.rows.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Row indices per class, `[normal, arc]`.
    pub fn class_indices(&self) -> [Vec<usize>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let arc = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - arc, arc]
    }

    pub fn has_both_classes(&self) -> bool {
        let [n, a] = self.class_counts();
        n > 0 && a > 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.rows.len() * 4 + self.labels.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 18 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format("missing AFCF header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let body = &bytes[18..];
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(count))
            .ok_or_else(|| Error::Format("feature file size overflow".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "feature payload is {} bytes, header implies {expected}",
                body.len()
            )));
        }
        let (row_bytes, labels) = body.split_at(count * dim * 4);
        let rows = row_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(dim, rows, labels.to_vec())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
