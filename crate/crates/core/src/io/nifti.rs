//! Minimal uncompressed NIfTI-1 import: little-endian, single-file `n+1`
//! magic, int16 or float32 payloads, slope/intercept scaling applied on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::volume::{IntensityUnit, Volume};
use crate::tensor::Tensor;

const HEADER_LEN: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(bytes: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([bytes[off], bytes[off + 1]])
}

fn f32_at(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::bad_format(path, "file shorter than the 348-byte header"));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::bad_format(path, "not a little-endian NIfTI-1 header"));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::bad_format(path, "magic is not 'n+1' (single-file, uncompressed)"));
    }

    let rank = i16_at(&bytes, 40);
    if !(2..=3).contains(&rank) {
        return Err(Error::bad_format(path, format!("unsupported dim[0] = {rank}")));
    }
    let mut dims = [1usize; 3]; // x, y, z
    for i in 0..rank as usize {
        let d = i16_at(&bytes, 40 + 2 * (i + 1));
        if d < 1 {
            return Err(Error::bad_format(path, format!("non-positive dim[{}] = {d}", i + 1)));
        }
        dims[i] = d as usize;
    }

    let datatype = i16_at(&bytes, 70);
    let bytes_per = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::bad_format(
                path,
                format!("datatype code {other} unsupported (int16 and float32 only)"),
            ))
        }
    };

    let mut spacing = [1.0f64; 3];
    for i in 0..3 {
        let p = f32_at(&bytes, 76 + 4 * (i + 1)) as f64;
        if p > 0.0 && p.is_finite() {
            spacing[i] = p;
        }
    }

    let vox_offset = f32_at(&bytes, 108) as usize;
    let offset = vox_offset.max(HEADER_LEN);
    let slope = match f32_at(&bytes, 112) as f64 {
        s if s == 0.0 || !s.is_finite() => 1.0,
        s => s,
    };
    let inter = match f32_at(&bytes, 116) as f64 {
        i if i.is_finite() => i,
        _ => 0.0,
    };

    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let numel = nx * ny * nz;
    let need = offset + numel * bytes_per;
    if bytes.len() < need {
        return Err(Error::bad_format(
            path,
            format!("payload truncated: need {need} bytes, file has {}", bytes.len()),
        ));
    }

    let payload = &bytes[offset..need];
    let mut data = Vec::with_capacity(numel);
    match datatype {
        DT_INT16 => {
            for chunk in payload.chunks_exact(2) {
                let raw = i16::from_le_bytes([chunk[0], chunk[1]]) as f64;
                data.push(raw * slope + inter);
            }
        }
        _ => {
            for chunk in payload.chunks_exact(4) {
                let raw = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
                data.push(raw * slope + inter);
            }
        }
    }

    // NIfTI stores x fastest; a z-slice is then a row-major (y, x) grid
    let tensor = Tensor::new(vec![nz, ny, nx], data)?;
    let mut vol = Volume::new(tensor, [spacing[2], spacing[1], spacing[0]], IntensityUnit::Hu)?;
    vol.source = Some(path.display().to_string());
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forge(
        dims: &[i16],
        datatype: i16,
        slope: f32,
        inter: f32,
        payload: &[u8],
        magic: &[u8; 4],
    ) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
        for (i, &d) in dims.iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        let bitpix: i16 = if datatype == DT_INT16 { 16 } else { 32 };
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        for i in 0..dims.len() {
            h[80 + 4 * i..84 + 4 * i].copy_from_slice(&1.5f32.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[116..120].copy_from_slice(&inter.to_le_bytes());
        h[344..348].copy_from_slice(magic);
        h.extend_from_slice(payload);
        h
    }

    fn write_tmp(bytes: &[u8]) -> tempfile::TempPath {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f.into_temp_path()
    }

    #[test]
    fn int16_with_scaling() {
        let raw: Vec<i16> = vec![-1000, 0, 40, 400, 1, 2];
        let payload: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = forge(&[3, 2, 1], DT_INT16, 2.0, -24.0, &payload, b"n+1\0");
        let path = write_tmp(&bytes);
        let vol = read_nifti(&path).unwrap();
        assert_eq!(vol.data.shape(), &[1, 2, 3]);
        assert_eq!(vol.data.at(&[0, 0, 0]), -2024.0);
        assert_eq!(vol.data.at(&[0, 1, 0]), 400.0 * 2.0 - 24.0);
        assert_eq!(vol.spacing, [1.5, 1.5, 1.5]);
        assert_eq!(vol.unit, IntensityUnit::Hu);
    }

    #[test]
    fn float32_zero_slope_means_unscaled() {
        let raw: Vec<f32> = vec![0.25, -3.5, 7.0, 1.0];
        let payload: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = forge(&[2, 2], DT_FLOAT32, 0.0, 0.0, &payload, b"n+1\0");
        let path = write_tmp(&bytes);
        let vol = read_nifti(&path).unwrap();
        assert_eq!(vol.data.shape(), &[1, 2, 2]);
        assert_eq!(vol.data.at(&[0, 0, 1]), -3.5);
    }

    #[test]
    fn rejects_bad_files() {
        let payload = 0i16.to_le_bytes().to_vec();
        let pair_magic = forge(&[1, 1], DT_INT16, 1.0, 0.0, &payload, b"ni1\0");
        assert!(read_nifti(&write_tmp(&pair_magic)).is_err());

        let bad_dtype = forge(&[1, 1], 64, 1.0, 0.0, &payload, b"n+1\0");
        assert!(read_nifti(&write_tmp(&bad_dtype)).is_err());

        let mut truncated = forge(&[4, 4], DT_INT16, 1.0, 0.0, &payload, b"n+1\0");
        truncated.truncate(352 + 2);
        assert!(matches!(read_nifti(&write_tmp(&truncated)), Err(Error::BadFormat { .. })));

        assert!(read_nifti(&write_tmp(&[0u8; 100])).is_err());
    }
}
