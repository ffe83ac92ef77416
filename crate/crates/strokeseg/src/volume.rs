//! In-memory volume types: single-modality images, label masks and the
//! channel-stacked network input.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Dwi,
    Adc,
    Flair,
    Other,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Dwi => write!(f, "DWI"),
            Modality::Adc => write!(f, "ADC"),
            Modality::Flair => write!(f, "FLAIR"),
            Modality::Other => write!(f, "OTHER"),
        }
    }
}

/// One 3D scalar grid with physical geometry.
#[derive(Debug, Clone)]
pub struct ImageVolume {
    pub data: Array3<f32>,
    pub geom: Geometry,
    pub modality: Modality,
}

impl ImageVolume {
    pub fn new(data: Array3<f32>, geom: Geometry, modality: Modality) -> Self {
        ImageVolume {
            data,
            geom,
            modality,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        let dims = self.dims();
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::Validation(format!(
                "volume has a degenerate dimension: {dims:?}"
            )));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation("volume contains NaN values".into()));
        }
        Ok(())
    }
}

/// Integer label grid aligned to a reference image geometry. Labels are
/// restricted to {0, 1} for the single-foreground-class task.
#[derive(Debug, Clone)]
pub struct SegmentationMask {
    pub labels: Array3<u8>,
    pub geom: Geometry,
}

impl SegmentationMask {
    pub fn new(labels: Array3<u8>, geom: Geometry) -> Self {
        SegmentationMask { labels, geom }
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.labels.dim();
        [d.0, d.1, d.2]
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if self.labels.iter().any(|&v| v > 1) {
            return Err(Error::Validation(
                "mask contains labels outside {0, 1}".into(),
            ));
        }
        Ok(())
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }
}

/// Channel-stacked volumes sharing one geometry; the network input.
#[derive(Debug, Clone)]
pub struct MultiChannelVolume {
    /// (channels, dim0, dim1, dim2)
    pub data: Array4<f32>,
    pub geom: Geometry,
    pub channel_names: Vec<String>,
}

impl MultiChannelVolume {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.1, d.2, d.3]
    }

    pub fn channel(&self, c: usize) -> ndarray::ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), c)
    }
}
