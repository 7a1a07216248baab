//! Volume container and the "VOL1" directory format: a `manifest.json`
//! describing shape/spacing/units next to a `data.tsr` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tsr;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityUnit {
    /// Raw CT Hounsfield units.
    Hu,
    /// Windowed/normalized values (unitless).
    Normalized,
}

/// A stack of 2-D slices with voxel spacing, the unit of record for
/// preprocessing and the cascade.
#[derive(Debug, Clone)]
pub struct Volume {
    /// Intensities, shape `(slices, h, w)`.
    pub data: Tensor,
    /// Voxel spacing in mm, `(between-slice, row, col)`.
    pub spacing: [f64; 3],
    pub unit: IntensityUnit,
    /// Where the volume came from, if loaded from disk.
    pub source: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    shape: Vec<usize>,
    spacing: [f64; 3],
    dtype: String,
    intensity_unit: IntensityUnit,
}

impl Volume {
    pub fn new(data: Tensor, spacing: [f64; 3], unit: IntensityUnit) -> Result<Self> {
        data.dims3()?;
        if !data.is_finite() {
            return Err(Error::Contract("volume intensities must be finite".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParam(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume { data, spacing, unit, source: None })
    }

    pub fn from_slices(slices: &[Tensor], spacing: [f64; 3], unit: IntensityUnit) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::InvalidParam("volume needs at least one slice".into()));
        }
        let (h, w) = slices[0].dims2()?;
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            let (sh, sw) = s.dims2()?;
            if (sh, sw) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "slice {sh}x{sw} does not match first slice {h}x{w}"
                )));
            }
            data.extend_from_slice(s.data());
        }
        Volume::new(Tensor::new(vec![slices.len(), h, w], data)?, spacing, unit)
    }

    pub fn num_slices(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// Copy of slice `i` as an `(h, w)` tensor.
    pub fn slice(&self, i: usize) -> Result<Tensor> {
        let (s, h, w) = self.data.dims3()?;
        if i >= s {
            return Err(Error::InvalidParam(format!("slice {i} out of range 0..{s}")));
        }
        let plane = h * w;
        Tensor::new(vec![h, w], self.data.data()[i * plane..(i + 1) * plane].to_vec())
    }

    /// Rebuild the volume by transforming each slice; slices may change size
    /// but must agree with each other.
    pub fn map_slices<F>(&self, unit: IntensityUnit, mut f: F) -> Result<Volume>
    where
        F: FnMut(usize, Tensor) -> Result<Tensor>,
    {
        let mut out = Vec::with_capacity(self.num_slices());
        for i in 0..self.num_slices() {
            out.push(f(i, self.slice(i)?)?);
        }
        let mut vol = Volume::from_slices(&out, self.spacing, unit)?;
        vol.source = self.source.clone();
        Ok(vol)
    }

    /// Write as a VOL1 directory (`manifest.json` + `data.tsr`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            shape: self.data.shape().to_vec(),
            spacing: self.spacing,
            dtype: "f64".into(),
            intensity_unit: self.unit,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        tsr::write_tensor(&dir.join("data.tsr"), &self.data)
    }

    pub fn load(dir: &Path) -> Result<Volume> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::bad_format(&manifest_path, e.to_string()))?;
        let data = tsr::read_tensor(&dir.join("data.tsr"))?;
        if data.shape() != manifest.shape.as_slice() {
            return Err(Error::bad_format(
                dir,
                format!("manifest shape {:?} != payload shape {:?}", manifest.shape, data.shape()),
            ));
        }
        let mut vol = Volume::new(data, manifest.spacing, manifest.intensity_unit)?;
        vol.source = Some(dir.display().to_string());
        Ok(vol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let data = Tensor::from_fn(&[3, 4, 5], |i| i as f64 * 0.25 - 7.0);
        let vol = Volume::new(data.clone(), [2.5, 0.8, 0.8], IntensityUnit::Hu).unwrap();
        vol.save(dir.path()).unwrap();
        let back = Volume::load(dir.path()).unwrap();
        assert_eq!(back.data.shape(), data.shape());
        assert_eq!(back.data.data(), data.data());
        assert_eq!(back.spacing, [2.5, 0.8, 0.8]);
        assert_eq!(back.unit, IntensityUnit::Hu);
        assert!(back.source.is_some());
    }

    #[test]
    fn rejects_bad_volumes() {
        let ok = Tensor::zeros(&[2, 4, 4]);
        assert!(Volume::new(Tensor::zeros(&[4, 4]), [1.0; 3], IntensityUnit::Hu).is_err());
        assert!(Volume::new(ok.clone(), [1.0, 0.0, 1.0], IntensityUnit::Hu).is_err());
        let mut nan = Tensor::zeros(&[2, 2, 2]);
        nan.data_mut()[3] = f64::NAN;
        assert!(Volume::new(nan, [1.0; 3], IntensityUnit::Hu).is_err());
        assert!(Volume::new(ok, [1.0; 3], IntensityUnit::Hu).is_ok());
    }

    #[test]
    fn slice_extraction_and_rebuild() {
        let vol = Volume::new(
            Tensor::from_fn(&[2, 3, 3], |i| i as f64),
            [1.0; 3],
            IntensityUnit::Normalized,
        )
        .unwrap();
        let s1 = vol.slice(1).unwrap();
        assert_eq!(s1.shape(), &[3, 3]);
        assert_eq!(s1.at(&[0, 0]), 9.0);
        assert!(vol.slice(2).is_err());

        let doubled = vol.map_slices(IntensityUnit::Normalized, |_, s| Ok(s.map(|v| v * 2.0))).unwrap();
        assert_eq!(doubled.slice(1).unwrap().at(&[0, 0]), 18.0);
    }

    #[test]
    fn manifest_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new(Tensor::zeros(&[2, 4, 4]), [1.0; 3], IntensityUnit::Hu).unwrap();
        vol.save(dir.path()).unwrap();
        // corrupt the payload with a different-shaped tensor
        tsr::write_tensor(&dir.path().join("data.tsr"), &Tensor::zeros(&[2, 4, 5])).unwrap();
        assert!(matches!(Volume::load(dir.path()), Err(Error::BadFormat { .. })));
    }
}
