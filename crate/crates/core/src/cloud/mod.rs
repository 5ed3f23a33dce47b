//! Point clouds with per-point attributes.

mod io;
pub mod manifest;
pub mod synth;

pub use io::{read_cloud, write_cloud, CloudFormat, BINARY_MAGIC};
pub use manifest::{DatasetManifest, ManifestFile, Split, ISPRS_CLASSES};
pub use synth::{synth_scene, SynthClass, SynthScene};

use crate::error::{Error, Result};

/// Label of points without ground truth; excluded from loss and metrics.
pub const UNLABELED: u8 = 255;
/// Segment id of points not yet partitioned.
pub const UNASSIGNED: u32 = u32::MAX;

/// Column-oriented point cloud. Intensity is stored raw.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
    pub return_count: Vec<u8>,
    pub label: Vec<u8>,
    pub segment: Vec<u32>,
}

impl PointCloud {
    /// A cloud with default attributes (zero intensity, one return,
    /// unlabeled, unassigned).
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Self {
        let n = positions.len();
        PointCloud {
            positions,
            intensity: vec![0.0; n],
            return_count: vec![1; n],
            label: vec![UNLABELED; n],
            segment: vec![UNASSIGNED; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        let lens = [
            self.intensity.len(),
            self.return_count.len(),
            self.label.len(),
            self.segment.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Format(format!(
                "attribute lengths {lens:?} differ from {n} positions"
            )));
        }
        Ok(())
    }

    /// Checks that every label is below `classes` or [`UNLABELED`].
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self
            .label
            .iter()
            .find(|&&l| l != UNLABELED && l as usize >= classes)
        {
            Some(&l) => Err(Error::InvalidArgument(format!(
                "label {l} outside the {classes} manifest classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn has_labels(&self) -> bool {
        self.label.iter().any(|&l| l != UNLABELED)
    }

    pub fn has_segments(&self) -> bool {
        !self.segment.is_empty() && self.segment.iter().all(|&s| s != UNASSIGNED)
    }

    /// Copies the points at `indices`.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            intensity: indices.iter().map(|&i| self.intensity[i]).collect(),
            return_count: indices.iter().map(|&i| self.return_count[i]).collect(),
            label: indices.iter().map(|&i| self.label[i]).collect(),
            segment: indices.iter().map(|&i| self.segment[i]).collect(),
        }
    }

    /// Intensity divided by `max` and clamped into `[0, 1]`.
    pub fn normalized_intensity(&self, max: f64) -> Vec<f64> {
        self.intensity
            .iter()
            .map(|&v| if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    }

    /// Per-class counts of labeled points.
    pub fn class_counts(&self, classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; classes];
        for &l in &self.label {
            if (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}
