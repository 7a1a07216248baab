//! CT preprocessing: HU windowing, tile-based adaptive histogram
//! equalization, per-slice normalization, and the crop/resize used to hand a
//! liver region to the tumor stage (with its inverse for reporting).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::volume::{IntensityUnit, Volume};
use crate::tensor::Tensor;

/// Clamp to `[lo, hi]`, then map affinely onto `[0, 1]`.
pub fn window_image(img: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if hi <= lo {
        return Err(Error::InvalidParam(format!("window needs hi > lo, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    Ok(img.map(|v| (v.clamp(lo, hi) - lo) / span))
}

/// Window a whole volume. Already-normalized volumes pass through untouched,
/// so windowing twice is safe.
pub fn hu_window(vol: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if vol.unit == IntensityUnit::Normalized {
        return Ok(vol.clone());
    }
    vol.map_slices(IntensityUnit::Normalized, |_, s| window_image(&s, lo, hi))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheConfig {
    /// Histogram cap as a multiple of the uniform bin count
    /// (cap = clip_limit · tile_pixels / bins).
    pub clip_limit: f64,
    /// Tile grid (rows, cols).
    pub tiles: (usize, usize),
    pub bins: usize,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig { clip_limit: 4.0, tiles: (8, 8), bins: 256 }
    }
}

/// Per-tile mapping from histogram bin to output value; `None` marks a
/// degenerate (single-bin) tile that maps values to themselves.
type TileMap = Option<Vec<f64>>;

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

fn tile_mapping(values: &[f64], cfg: &ClaheConfig) -> TileMap {
    let bins = cfg.bins;
    let mut hist = vec![0.0f64; bins];
    let first = bin_of(values[0], bins);
    let mut degenerate = true;
    for &v in values {
        let b = bin_of(v, bins);
        degenerate &= b == first;
        hist[b] += 1.0;
    }
    if degenerate {
        return None;
    }

    let total = values.len() as f64;
    let cap = cfg.clip_limit * total / bins as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > cap {
            excess += *h - cap;
            *h = cap;
        }
    }
    let bonus = excess / bins as f64;

    // midpoint-of-bin cumulative mapping keeps outputs inside [0, 1]
    let mut map = Vec::with_capacity(bins);
    let mut cdf = 0.0;
    for h in hist.iter().map(|h| h + bonus) {
        cdf += h;
        map.push((cdf - 0.5 * h) / total);
    }
    Some(map)
}

/// Contrast-limited adaptive histogram equalization on a `[0, 1]` image:
/// per-tile clipped equalization with the excess redistributed uniformly,
/// blended bilinearly between tile centers.
pub fn clahe(img: &Tensor, cfg: &ClaheConfig) -> Result<Tensor> {
    let (h, w) = img.dims2()?;
    let (th, tw) = cfg.tiles;
    if th == 0 || tw == 0 || cfg.bins == 0 {
        return Err(Error::InvalidParam("tile grid and bin count must be positive".into()));
    }
    if cfg.clip_limit <= 0.0 || !cfg.clip_limit.is_finite() {
        return Err(Error::InvalidParam("clip limit must be positive".into()));
    }
    if h < th || w < tw {
        return Err(Error::InvalidParam(format!(
            "image {h}x{w} smaller than the {th}x{tw} tile grid"
        )));
    }
    if img.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract("equalization input must lie in [0, 1]".into()));
    }

    let row_edges: Vec<usize> = (0..=th).map(|t| t * h / th).collect();
    let col_edges: Vec<usize> = (0..=tw).map(|t| t * w / tw).collect();
    let centers = |edges: &[usize]| -> Vec<f64> {
        edges.windows(2).map(|e| (e[0] + e[1] - 1) as f64 / 2.0).collect()
    };
    let row_centers = centers(&row_edges);
    let col_centers = centers(&col_edges);

    let data = img.data();
    let mut maps = Vec::with_capacity(th * tw);
    for tr in 0..th {
        for tc in 0..tw {
            let mut values =
                Vec::with_capacity((row_edges[tr + 1] - row_edges[tr]) * (col_edges[tc + 1] - col_edges[tc]));
            for r in row_edges[tr]..row_edges[tr + 1] {
                values.extend_from_slice(&data[r * w + col_edges[tc]..r * w + col_edges[tc + 1]]);
            }
            maps.push(tile_mapping(&values, cfg));
        }
    }

    // neighbor tiles and blend weight along one axis
    let locate = |pos: f64, centers: &[f64]| -> (usize, usize, f64) {
        let n = centers.len();
        if n == 1 || pos <= centers[0] {
            return (0, 0, 0.0);
        }
        if pos >= centers[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let hi = centers.partition_point(|&c| c <= pos);
        let lo = hi - 1;
        (lo, hi, (pos - centers[lo]) / (centers[hi] - centers[lo]))
    };

    let mut out = vec![0.0f64; h * w];
    for r in 0..h {
        let (r0, r1, fr) = locate(r as f64, &row_centers);
        for c in 0..w {
            let (c0, c1, fc) = locate(c as f64, &col_centers);
            let v = data[r * w + c];
            let b = bin_of(v, cfg.bins);
            let lookup = |tr: usize, tc: usize| match &maps[tr * tw + tc] {
                Some(m) => m[b],
                None => v,
            };
            out[r * w + c] = (1.0 - fr) * (1.0 - fc) * lookup(r0, c0)
                + (1.0 - fr) * fc * lookup(r0, c1)
                + fr * (1.0 - fc) * lookup(r1, c0)
                + fr * fc * lookup(r1, c1);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Zero-mean, unit-variance scaling of one slice; constant slices become
/// all-zero rather than dividing by zero.
pub fn normalize(img: &Tensor) -> Result<Tensor> {
    let n = img.numel() as f64;
    if n == 0.0 {
        return Err(Error::InvalidParam("cannot normalize an empty image".into()));
    }
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(Tensor::zeros(img.shape()));
    }
    let std = var.sqrt();
    Ok(img.map(|v| (v - mean) / std))
}

/// Window + equalize + normalize every slice of a volume.
pub fn preprocess_volume(vol: &Volume, lo: f64, hi: f64, cfg: &ClaheConfig) -> Result<Volume> {
    let windowed = hu_window(vol, lo, hi)?;
    windowed.map_slices(IntensityUnit::Normalized, |_, s| normalize(&clahe(&s, cfg)?))
}

pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = img.dims2()?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidParam("resize target must be positive".into()));
    }
    let data = img.data();
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        let sr = ((r as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fr = sr - r0 as f64;
        for c in 0..ow {
            let sc = ((c as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fc = sc - c0 as f64;
            out[r * ow + c] = (1.0 - fr) * (1.0 - fc) * data[r0 * w + c0]
                + (1.0 - fr) * fc * data[r0 * w + c1]
                + fr * (1.0 - fc) * data[r1 * w + c0]
                + fr * fc * data[r1 * w + c1];
        }
    }
    Tensor::new(vec![oh, ow], out)
}

pub fn resize_nearest(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = img.dims2()?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidParam("resize target must be positive".into()));
    }
    let data = img.data();
    let pick = |dst: usize, o: usize, s: usize| -> usize {
        let src = (dst as f64 + 0.5) * s as f64 / o as f64 - 0.5;
        (src.round().max(0.0) as usize).min(s - 1)
    };
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        let sr = pick(r, oh, h);
        for c in 0..ow {
            out[r * ow + c] = data[sr * w + pick(c, ow, w)];
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// How a liver crop was taken from a source slice, enough to undo it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropTransform {
    /// Index of the source slice within its volume.
    pub slice: usize,
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
    /// Requested margin at the 64-pixel reference scale.
    pub margin: usize,
    /// Output side length.
    pub target: usize,
}

/// Cut the mask's bounding box (dilated by `margin`, which scales with image
/// size relative to 64 px), resize to `target`², re-normalize, and zero
/// everything outside the resized mask.
pub fn liver_crop(
    img: &Tensor,
    mask: &Tensor,
    margin: usize,
    target: usize,
) -> Result<(Tensor, CropTransform)> {
    let (h, w) = img.dims2()?;
    let (mh, mw) = mask.dims2()?;
    if (h, w) != (mh, mw) {
        return Err(Error::ShapeMismatch(format!("image {h}x{w} vs mask {mh}x{mw}")));
    }
    if !mask.is_binary() {
        return Err(Error::Contract("crop mask must be binary 0/1".into()));
    }
    if target == 0 {
        return Err(Error::InvalidParam("crop target must be positive".into()));
    }

    let md = mask.data();
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for r in 0..h {
        for c in 0..w {
            if md[r * w + c] == 1.0 {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    if rmin == usize::MAX {
        return Err(Error::EmptyMask);
    }

    let scaled = |m: usize, dim: usize| (m as f64 * dim as f64 / 64.0).round() as usize;
    let (mr, mc) = (scaled(margin, h), scaled(margin, w));
    let row0 = rmin.saturating_sub(mr);
    let row1 = (rmax + mr + 1).min(h);
    let col0 = cmin.saturating_sub(mc);
    let col1 = (cmax + mc + 1).min(w);
    let (bh, bw) = (row1 - row0, col1 - col0);

    let cut = |src: &Tensor| {
        Tensor::from_fn(&[bh, bw], |i| {
            let (r, c) = (i / bw, i % bw);
            src.data()[(row0 + r) * w + col0 + c]
        })
    };
    let crop_img = resize_bilinear(&cut(img), target, target)?;
    let crop_mask = resize_nearest(&cut(mask), target, target)?;
    let normed = normalize(&crop_img)?;
    let out = Tensor::from_fn(&[target, target], |i| normed.data()[i] * crop_mask.data()[i]);

    let transform =
        CropTransform { slice: 0, row0, col0, height: bh, width: bw, margin, target };
    Ok((out, transform))
}

fn cut_box(src: &Tensor, t: &CropTransform) -> Result<Tensor> {
    let (h, w) = src.dims2()?;
    if t.row0 + t.height > h || t.col0 + t.width > w || t.height == 0 || t.width == 0 {
        return Err(Error::ShapeMismatch(format!(
            "transform box ({},{})+{}x{} exceeds source {h}x{w}",
            t.row0, t.col0, t.height, t.width
        )));
    }
    Ok(Tensor::from_fn(&[t.height, t.width], |i| {
        let (r, c) = (i / t.width, i % t.width);
        src.data()[(t.row0 + r) * w + t.col0 + c]
    }))
}

/// Cut an existing crop's box out of a companion mask and nearest-resize it
/// to the crop resolution, so a second label rides along with the crop.
pub fn crop_companion_mask(mask: &Tensor, t: &CropTransform) -> Result<Tensor> {
    resize_nearest(&cut_box(mask, t)?, t.target, t.target)
}

/// Bilinear analogue of [`crop_companion_mask`] for intensity images.
pub fn crop_companion_image(img: &Tensor, t: &CropTransform) -> Result<Tensor> {
    resize_bilinear(&cut_box(img, t)?, t.target, t.target)
}

/// Nearest-neighbor inverse of the crop/resize: place a crop-space mask back
/// into a full slice, background everywhere outside the crop box.
pub fn map_back(mask_in_crop: &Tensor, t: &CropTransform, source_shape: (usize, usize)) -> Result<Tensor> {
    let (ch, cw) = mask_in_crop.dims2()?;
    if (ch, cw) != (t.target, t.target) {
        return Err(Error::ShapeMismatch(format!(
            "crop mask {ch}x{cw} does not match transform target {0}x{0}",
            t.target
        )));
    }
    let (h, w) = source_shape;
    if t.row0 + t.height > h || t.col0 + t.width > w || t.height == 0 || t.width == 0 {
        return Err(Error::ShapeMismatch(format!(
            "transform box ({},{})+{}x{} exceeds source {h}x{w}",
            t.row0, t.col0, t.height, t.width
        )));
    }
    let pick = |dst: usize, n: usize| -> usize {
        let src = (dst as f64 + 0.5) * t.target as f64 / n as f64 - 0.5;
        (src.round().max(0.0) as usize).min(t.target - 1)
    };
    let mut out = Tensor::zeros(&[h, w]);
    let od = out.data_mut();
    for r in 0..t.height {
        let cr = pick(r, t.height);
        for c in 0..t.width {
            od[(t.row0 + r) * w + t.col0 + c] = mask_in_crop.data()[cr * t.target + pick(c, t.width)];
        }
    }
    Ok(out)
}
