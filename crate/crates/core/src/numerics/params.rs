use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of segments describing a flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub segments: Vec<Segment>,
    pub total_len: usize,
}

impl Manifest {
    pub fn new(segments: Vec<Segment>) -> Self {
        let total_len = segments.iter().map(Segment::len).sum();
        Self {
            segments,
            total_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: usize = self.segments.iter().map(Segment::len).sum();
        if sum != self.total_len {
            return Err(Error::shape(
                "Manifest",
                format!("total_len {} but segments hold {sum}", self.total_len),
            ));
        }
        Ok(())
    }
}

/// Flattened parameter vector plus the manifest that gives it structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    manifest: Manifest,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new(manifest: Manifest, values: Vec<f64>) -> Result<Self> {
        manifest.validate()?;
        if values.len() != manifest.total_len {
            return Err(Error::shape(
                "ParamSet::new",
                format!(
                    "{} values for manifest of length {}",
                    values.len(),
                    manifest.total_len
                ),
            ));
        }
        Ok(Self { manifest, values })
    }

    pub fn zeros(manifest: Manifest) -> Self {
        let values = vec![0.0; manifest.total_len];
        Self { manifest, values }
    }

    /// Assembles a parameter set from named matrices, in order.
    pub fn from_matrices(parts: Vec<(String, Matrix)>) -> Self {
        let mut segments = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        for (name, m) in parts {
            segments.push(Segment::new(name, m.rows(), m.cols()));
            values.extend_from_slice(m.data());
        }
        Self {
            manifest: Manifest::new(segments),
            values,
        }
    }

    #[inline]
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.manifest.segments
    }

    /// Copies every segment out as a matrix.
    pub fn matrices(&self) -> Vec<Matrix> {
        let mut offset = 0;
        self.manifest
            .segments
            .iter()
            .map(|s| {
                let data = self.values[offset..offset + s.len()].to_vec();
                offset += s.len();
                Matrix::new(s.rows, s.cols, data).expect("manifest is consistent")
            })
            .collect()
    }

    pub fn segment(&self, name: &str) -> Option<Matrix> {
        let mut offset = 0;
        for s in &self.manifest.segments {
            if s.name == name {
                let data = self.values[offset..offset + s.len()].to_vec();
                return Some(Matrix::new(s.rows, s.cols, data).expect("manifest is consistent"));
            }
            offset += s.len();
        }
        None
    }

    /// Mutable view of one named segment's values.
    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let mut offset = 0;
        for s in &self.manifest.segments {
            if s.name == name {
                return Some(&mut self.values[offset..offset + s.len()]);
            }
            offset += s.len();
        }
        None
    }

    pub fn check_same_manifest(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.manifest != other.manifest {
            return Err(Error::shape(op, "parameter manifests differ"));
        }
        Ok(())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &ParamSet, scale: f64) -> Result<ParamSet> {
        self.check_same_manifest(other, "ParamSet::add_scaled")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(ParamSet {
            manifest: self.manifest.clone(),
            values,
        })
    }

    pub fn scale(&self, factor: f64) -> ParamSet {
        ParamSet {
            manifest: self.manifest.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
