//! Boundary distance transform and the derived per-pixel loss weights.
//!
//! The weight map emphasizes pixels near the mask boundary: with boundary
//! distance `D`, foreground indicator `F`, amplitude `w` and length scale
//! `sigma`, the raw score is `A = (w·F + 1) · exp(-D / (2 sigma^2))`,
//! min-max normalized to `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Foreground pixels with at least one in-bounds 4-neighbor background pixel.
fn boundary_pixels(mask: &Tensor) -> Result<Vec<(usize, usize)>> {
    let (h, w) = mask.dims2()?;
    if !mask.is_binary() {
        return Err(Error::Contract("mask must be binary 0/1".into()));
    }
    let d = mask.data();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if d[r * w + c] != 1.0 {
                continue;
            }
            let neighbors = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            if neighbors
                .iter()
                .any(|&(nr, nc)| nr < h && nc < w && d[nr * w + nc] == 0.0)
            {
                out.push((r, c));
            }
        }
    }
    Ok(out)
}

/// One-dimensional squared-distance transform (lower envelope of parabolas).
/// `f` holds per-position offsets; `big` stands in for "no site here".
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = (f[q] + (q * q) as f64 - f[p] - (p * p) as f64) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // the new parabola dominates everything so far
            v[k] = q;
            z[k] = f64::NEG_INFINITY;
            z[k + 1] = f64::INFINITY;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        d[q] = diff * diff + f[p];
    }
}

/// Exact Euclidean distance from every pixel to the nearest boundary pixel.
pub fn distance_map(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = mask.dims2()?;
    let boundary = boundary_pixels(mask)?;
    if boundary.is_empty() {
        return Err(Error::EmptyBoundary);
    }

    // squared-distance transform seeded at boundary pixels, large-but-finite
    // elsewhere (larger than any achievable squared distance)
    let big = (h * h + w * w + 1) as f64;
    let mut sq = vec![big; h * w];
    for &(r, c) in &boundary {
        sq[r * w + c] = 0.0;
    }

    let n = h.max(w);
    let mut f = vec![0.0f64; n];
    let mut d = vec![0.0f64; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];

    for r in 0..h {
        f[..w].copy_from_slice(&sq[r * w..(r + 1) * w]);
        dt_1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        sq[r * w..(r + 1) * w].copy_from_slice(&d[..w]);
    }
    for c in 0..w {
        for r in 0..h {
            f[r] = sq[r * w + c];
        }
        dt_1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for r in 0..h {
            sq[r * w + c] = d[r];
        }
    }

    Ok(Tensor::new(vec![h, w], sq.iter().map(|&s| s.sqrt()).collect())?)
}

pub struct WeightMap {
    /// Min-max normalized weights in `[0, 1]`.
    pub weights: Tensor,
    /// Euclidean boundary distances.
    pub distance: Tensor,
    /// Foreground indicator.
    pub roi: Tensor,
}

/// Boundary-emphasis weights for the weighted dice loss.
pub fn weight_map(mask: &Tensor, w: f64, sigma: f64) -> Result<WeightMap> {
    if w < 0.0 || !w.is_finite() {
        return Err(Error::InvalidParam("weight-map amplitude must be finite and >= 0".into()));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidParam("weight-map sigma must be positive".into()));
    }
    let distance = distance_map(mask)?;
    let two_sigma_sq = 2.0 * sigma * sigma;
    let a = Tensor::from_fn(mask.shape(), |i| {
        (w * mask.data()[i] + 1.0) * (-distance.data()[i] / two_sigma_sq).exp()
    });
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in a.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return Err(Error::DegenerateMap);
    }
    let weights = a.map(|v| (v - lo) / (hi - lo));
    Ok(WeightMap { weights, distance, roi: mask.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask2d(h: usize, w: usize, ones: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for &(r, c) in ones {
            t.data_mut()[r * w + c] = 1.0;
        }
        t
    }

    fn brute_force(mask: &Tensor) -> Option<Tensor> {
        let (h, w) = mask.dims2().unwrap();
        let boundary = boundary_pixels(mask).unwrap();
        if boundary.is_empty() {
            return None;
        }
        Some(Tensor::from_fn(&[h, w], |i| {
            let (r, c) = (i / w, i % w);
            boundary
                .iter()
                .map(|&(br, bc)| {
                    let dr = r as f64 - br as f64;
                    let dc = c as f64 - bc as f64;
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        }))
    }

    #[test]
    fn boundary_pixels_are_at_distance_zero() {
        // 4x4 block of foreground inside an 8x8 image: every block pixel on
        // the block edge is boundary, the 2x2 core is interior
        let ones: Vec<(usize, usize)> = (2..6).flat_map(|r| (2..6).map(move |c| (r, c))).collect();
        let m = mask2d(8, 8, &ones);
        let d = distance_map(&m).unwrap();
        for r in 2..6 {
            for c in 2..6 {
                let on_edge = r == 2 || r == 5 || c == 2 || c == 5;
                if on_edge {
                    assert_eq!(d.at(&[r, c]), 0.0);
                } else {
                    assert_eq!(d.at(&[r, c]), 1.0);
                }
            }
        }
    }

    #[test]
    fn single_pixel_foreground_geometry() {
        let m = mask2d(9, 9, &[(4, 4)]);
        let d = distance_map(&m).unwrap();
        assert_eq!(d.at(&[4, 4]), 0.0);
        assert_eq!(d.at(&[4, 7]), 3.0);
        assert_eq!(d.at(&[1, 0]), (9.0f64 + 16.0).sqrt());
    }

    #[test]
    fn degenerate_masks_have_no_boundary() {
        assert!(matches!(distance_map(&Tensor::zeros(&[4, 4])), Err(Error::EmptyBoundary)));
        assert!(matches!(
            distance_map(&Tensor::full(&[4, 4], 1.0)),
            Err(Error::EmptyBoundary)
        ));
    }

    #[test]
    fn matches_brute_force_on_fixed_masks() {
        let cases = vec![
            mask2d(5, 7, &[(0, 0), (4, 6), (2, 3)]),
            mask2d(6, 6, &(0..6).map(|r| (r, 2)).collect::<Vec<_>>()),
            mask2d(3, 9, &[(1, 1), (1, 2), (1, 3), (2, 7)]),
        ];
        for m in cases {
            let got = distance_map(&m).unwrap();
            let want = brute_force(&m).unwrap();
            assert_eq!(got.data(), want.data());
        }
    }

    #[test]
    fn weight_map_normalization_and_boundary_dominance() {
        let ones: Vec<(usize, usize)> = (2..6).flat_map(|r| (2..6).map(move |c| (r, c))).collect();
        let m = mask2d(8, 8, &ones);
        let wm = weight_map(&m, 0.05, 20.0).unwrap();
        let vals = wm.weights.data();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);

        // every boundary pixel scores raw A = 1.05, strictly above all others,
        // so exactly the boundary gets weight 1
        for r in 0..8 {
            for c in 0..8 {
                let is_boundary = (2..6).contains(&r)
                    && (2..6).contains(&c)
                    && (r == 2 || r == 5 || c == 2 || c == 5);
                if is_boundary {
                    assert_eq!(wm.weights.at(&[r, c]), 1.0);
                } else {
                    assert!(wm.weights.at(&[r, c]) < 1.0);
                }
            }
        }
    }

    #[test]
    fn weight_map_degenerate_when_modulation_vanishes() {
        let m = mask2d(4, 4, &[(1, 1)]);
        // amplitude 0 and an absurd length scale flatten A to exactly 1.0
        assert!(matches!(weight_map(&m, 0.0, 1e12), Err(Error::DegenerateMap)));
        assert!(weight_map(&m, 0.0, 20.0).is_ok());
    }

    proptest! {
        #[test]
        fn distance_matches_brute_force(seed in 0u64..200) {
            let (h, w) = (6usize, 8usize);
            let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 60) % 3 == 0
            };
            let m = Tensor::from_fn(&[h, w], |_| f64::from(next()));
            match brute_force(&m) {
                None => prop_assert!(matches!(distance_map(&m), Err(Error::EmptyBoundary))),
                Some(want) => {
                    let got = distance_map(&m).unwrap();
                    prop_assert_eq!(got.data(), want.data());
                }
            }
        }

        #[test]
        fn weights_stay_in_unit_interval(seed in 0u64..100) {
            let mut state = seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(17);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 61) % 2 == 0
            };
            let m = Tensor::from_fn(&[7, 7], |_| f64::from(next()));
            if brute_force(&m).is_some() {
                let wm = weight_map(&m, 0.05, 20.0).unwrap();
                let vals = wm.weights.data();
                prop_assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!(vals.iter().any(|&v| v == 0.0));
                prop_assert!(vals.iter().any(|&v| v == 1.0));
            }
        }
    }
}
