//! Synthetic abdominal CT phantoms: an elliptical "liver" with an intensity
//! plateau and texture, darker lesions inside it, liver-like distractor blobs
//! outside it, and additive noise — enough structure for the cascade to have
//! something real to learn at desk scale.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tsr;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub case_id: String,
    pub slice_index: usize,
    /// Raw HU intensities, `(h, w)`.
    pub image: Tensor,
    pub liver: Tensor,
    pub tumor: Tensor,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if self.liver.shape() != shape || self.tumor.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "sample {}:{} mask shapes disagree with image {shape:?}",
                self.case_id, self.slice_index
            )));
        }
        if !self.liver.is_binary() || !self.tumor.is_binary() {
            return Err(Error::Contract("masks must be binary 0/1".into()));
        }
        if !self.image.is_finite() {
            return Err(Error::Contract("image intensities must be finite".into()));
        }
        for (t, l) in self.tumor.iter().zip(self.liver.iter()) {
            if *t == 1.0 && *l == 0.0 {
                return Err(Error::Contract(format!(
                    "sample {}:{} has tumor outside the liver",
                    self.case_id, self.slice_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cases: usize,
    pub slices_per_case: usize,
    pub size: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_cases: usize, slices_per_case: usize, size: usize) -> Self {
        SynthConfig { seed, n_cases, slices_per_case, size }
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::InvalidConfig(format!(
                "size must be a positive multiple of 16, got {}",
                self.size
            )));
        }
        if self.n_cases == 0 || self.slices_per_case == 0 {
            return Err(Error::InvalidConfig("need at least one case and one slice".into()));
        }
        Ok(())
    }
}

struct Ellipse {
    cr: f64,
    cc: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        self.sq(r, c) <= 1.0
    }

    /// Normalized squared elliptical radius (1.0 on the boundary).
    fn sq(&self, r: f64, c: f64) -> f64 {
        let (dr, dc) = (r - self.cr, c - self.cc);
        let u = (dr * self.cos + dc * self.sin) / self.a;
        let v = (-dr * self.sin + dc * self.cos) / self.b;
        u * u + v * v
    }
}

struct CaseGeometry {
    liver: Ellipse,
    /// (center r, center c, radius) in liver-local terms.
    tumors: Vec<(f64, f64, f64)>,
    distractors: Vec<(f64, f64, f64)>,
    liver_hu: f64,
    tumor_hu: f64,
    distractor_hu: f64,
}

fn case_rng(seed: u64, case: usize) -> ChaCha20Rng {
    // independent substream per case so corpus layout never shifts samples
    ChaCha20Rng::seed_from_u64(seed ^ (case as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn sample_case(rng: &mut ChaCha20Rng, size: usize) -> CaseGeometry {
    let s = size as f64;
    // liver area fraction tuned so per-slice coverage stays within 10–40%
    // after the ±8% per-slice axis jitter
    let frac = rng.random_range(0.14..0.32);
    let ratio = rng.random_range(0.75..1.33);
    let a = (frac * s * s * ratio / std::f64::consts::PI).sqrt();
    let b = a / ratio;
    let max_half = a.max(b);
    let margin = (max_half * 1.15).min(s / 2.0 - 1.0);
    let cr = rng.random_range(margin..s - margin);
    let cc = rng.random_range(margin..s - margin);
    let phi = rng.random_range(0.0..std::f64::consts::PI);
    let liver = Ellipse { cr, cc, a, b, cos: phi.cos(), sin: phi.sin() };

    let n_tumors = *[0usize, 1, 1, 2, 2, 3].get(rng.random_range(0..6)).unwrap();
    let mut tumors = Vec::with_capacity(n_tumors);
    for _ in 0..n_tumors {
        // rejection-sample a center well inside the liver
        let mut center = (cr, cc);
        for _ in 0..100 {
            let r = rng.random_range(cr - a..cr + a);
            let c = rng.random_range(cc - a..cc + a);
            if liver.sq(r, c) <= 0.5 {
                center = (r, c);
                break;
            }
        }
        let radius = rng.random_range(0.10..0.22) * a.min(b);
        tumors.push((center.0, center.1, radius));
    }

    let n_distractors = rng.random_range(1..=2usize);
    let mut distractors = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        let radius = rng.random_range(0.05..0.10) * s;
        let r = rng.random_range(radius..s - radius);
        let c = rng.random_range(radius..s - radius);
        distractors.push((r, c, radius));
    }

    CaseGeometry {
        liver,
        tumors,
        distractors,
        liver_hu: rng.random_range(110.0..130.0),
        tumor_hu: rng.random_range(55.0..80.0),
        distractor_hu: rng.random_range(100.0..140.0),
    }
}

fn render_slice(
    rng: &mut ChaCha20Rng,
    geo: &CaseGeometry,
    size: usize,
) -> (Tensor, Tensor, Tensor) {
    let s = size as f64;
    // slice-to-slice organ size wobble
    let scale = rng.random_range(0.92f64..1.08);
    let liver = Ellipse {
        a: geo.liver.a * scale,
        b: geo.liver.b * scale,
        ..geo.liver
    };
    let tumor_scale = rng.random_range(0.9f64..1.1);
    let grad_r = rng.random_range(-20.0..20.0);
    let grad_c = rng.random_range(-20.0..20.0);

    let texture = Normal::new(0.0, 9.0).expect("valid normal");
    let noise = Normal::new(0.0, 8.0).expect("valid normal");

    let n = size * size;
    let mut img = vec![0.0f64; n];
    let mut liver_mask = vec![0.0f64; n];
    let mut tumor_mask = vec![0.0f64; n];
    for (idx, v) in img.iter_mut().enumerate() {
        let (r, c) = ((idx / size) as f64, (idx % size) as f64);
        let in_liver = liver.contains(r, c);
        let in_tumor = in_liver
            && geo.tumors.iter().any(|&(tr, tc, rad)| {
                let d2 = (r - tr) * (r - tr) + (c - tc) * (c - tc);
                d2 <= (rad * tumor_scale) * (rad * tumor_scale)
            });
        let in_distractor = !in_liver
            && geo.distractors.iter().any(|&(dr, dc, rad)| {
                (r - dr) * (r - dr) + (c - dc) * (c - dc) <= rad * rad
            });

        let base = if in_tumor {
            geo.tumor_hu
        } else if in_liver {
            geo.liver_hu + texture.sample(rng)
        } else if in_distractor {
            geo.distractor_hu + texture.sample(rng)
        } else {
            -60.0 + grad_r * (r / s - 0.5) + grad_c * (c / s - 0.5)
        };
        *v = base + noise.sample(rng);
        liver_mask[idx] = f64::from(in_liver);
        tumor_mask[idx] = f64::from(in_tumor);
    }
    let shape = vec![size, size];
    (
        Tensor::new(shape.clone(), img).expect("shape matches"),
        Tensor::new(shape.clone(), liver_mask).expect("shape matches"),
        Tensor::new(shape, tumor_mask).expect("shape matches"),
    )
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.n_cases * cfg.slices_per_case);
    for case in 0..cfg.n_cases {
        let mut rng = case_rng(cfg.seed, case);
        let geo = sample_case(&mut rng, cfg.size);
        for slice_index in 0..cfg.slices_per_case {
            let (image, liver, tumor) = render_slice(&mut rng, &geo, cfg.size);
            records.push(SampleRecord {
                case_id: format!("case_{case:03}"),
                slice_index,
                image,
                liver,
                tumor,
            });
        }
    }
    Ok(records)
}

#[derive(Debug)]
pub struct Split {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// 70/10/20 split by case id (never splitting a case across partitions).
pub fn split_by_case(records: &[SampleRecord]) -> Result<Split> {
    let mut case_ids: Vec<&str> = Vec::new();
    for r in records {
        if case_ids.last() != Some(&r.case_id.as_str()) && !case_ids.contains(&r.case_id.as_str())
        {
            case_ids.push(&r.case_id);
        }
    }
    let n = case_ids.len();
    if n < 3 {
        return Err(Error::InvalidParam(format!("need >= 3 cases to split, got {n}")));
    }
    let n_test = ((n as f64 * 0.2).round() as usize).max(1);
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::InvalidParam(format!("{n} cases leave no training cases")));
    }
    let class_of = |case: &str| -> u8 {
        let pos = case_ids.iter().position(|c| *c == case).expect("known case");
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for r in records {
        match class_of(&r.case_id) {
            0 => split.train.push(r.clone()),
            1 => split.val.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    case_id: String,
    slice_index: usize,
    stem: String,
}

pub fn save_dataset(dir: &Path, records: &[SampleRecord]) -> Result<()> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let stem = format!("{}_s{:03}", r.case_id, r.slice_index);
        tsr::write_tensor(&samples_dir.join(format!("{stem}.image.tsr")), &r.image)?;
        tsr::write_tensor(&samples_dir.join(format!("{stem}.liver.tsr")), &r.liver)?;
        tsr::write_tensor(&samples_dir.join(format!("{stem}.tumor.tsr")), &r.tumor)?;
        entries.push(SampleEntry {
            case_id: r.case_id.clone(),
            slice_index: r.slice_index,
            stem,
        });
    }
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&DatasetManifest { samples: entries })
        .map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::bad_format(&manifest_path, e.to_string()))?;
    let samples_dir = dir.join("samples");
    let mut records = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let record = SampleRecord {
            image: tsr::read_tensor(&samples_dir.join(format!("{}.image.tsr", e.stem)))?,
            liver: tsr::read_tensor(&samples_dir.join(format!("{}.liver.tsr", e.stem)))?,
            tumor: tsr::read_tensor(&samples_dir.join(format!("{}.tumor.tsr", e.stem)))?,
            case_id: e.case_id,
            slice_index: e.slice_index,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = SynthConfig::new(42, 4, 2, 64);
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.case_id, y.case_id);
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.liver.data(), y.liver.data());
            assert_eq!(x.tumor.data(), y.tumor.data());
        }
        let c = synth_dataset(&SynthConfig::new(43, 4, 2, 64)).unwrap();
        assert_ne!(a[0].image.data(), c[0].image.data());
    }

    #[test]
    fn records_satisfy_their_invariants() {
        let records = synth_dataset(&SynthConfig::new(7, 10, 3, 64)).unwrap();
        for r in &records {
            r.validate().unwrap();
        }
        // tumors do occur somewhere in the corpus
        assert!(records.iter().any(|r| r.tumor.iter().any(|&v| v == 1.0)));
    }

    #[test]
    fn liver_coverage_stays_in_band() {
        // generator statistics over a large corpus: every slice in 10–40%
        let records = synth_dataset(&SynthConfig::new(1, 250, 4, 64)).unwrap();
        assert_eq!(records.len(), 1000);
        let mut fractions: Vec<f64> = records
            .iter()
            .map(|r| r.liver.iter().sum::<f64>() / r.liver.numel() as f64)
            .collect();
        fractions.sort_by(f64::total_cmp);
        assert!(fractions[0] >= 0.10, "min coverage {}", fractions[0]);
        assert!(*fractions.last().unwrap() <= 0.40, "max coverage {}", fractions.last().unwrap());
        // and it actually varies
        assert!(*fractions.last().unwrap() - fractions[0] > 0.05);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(synth_dataset(&SynthConfig::new(1, 2, 2, 60)).is_err());
        assert!(synth_dataset(&SynthConfig::new(1, 0, 2, 64)).is_err());
    }

    #[test]
    fn split_respects_case_boundaries() {
        let records = synth_dataset(&SynthConfig::new(5, 10, 2, 64)).unwrap();
        let split = split_by_case(&records).unwrap();
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), records.len());
        assert_eq!(split.train.len(), 14); // 7 cases x 2 slices
        assert_eq!(split.val.len(), 2);
        assert_eq!(split.test.len(), 4);
        let train_ids: Vec<&String> = split.train.iter().map(|r| &r.case_id).collect();
        for r in split.val.iter().chain(split.test.iter()) {
            assert!(!train_ids.contains(&&r.case_id));
        }
        assert!(split_by_case(&records[..4]).is_err()); // only 2 cases
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let records = synth_dataset(&SynthConfig::new(11, 3, 2, 32)).unwrap();
        save_dataset(dir.path(), &records).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(back.iter()) {
            assert_eq!(a.case_id, b.case_id);
            assert_eq!(a.slice_index, b.slice_index);
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.liver.data(), b.liver.data());
            assert_eq!(a.tumor.data(), b.tumor.data());
        }
    }
}
