//! Fully-connected pairwise CRF refinement of probability maps.
//!
//! The pairwise potential couples every pixel pair through an appearance
//! kernel (close in space and intensity) plus a smoothness kernel (close in
//! space), weighted by a Potts label compatibility. Inference is synchronous
//! mean-field with dense O(N²) message passing — exact enough at desk scale
//! to be validated against exhaustive enumeration on tiny problems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{resize_bilinear, resize_nearest};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-7;

fn default_pixel_cap() -> usize {
    4096
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    /// Appearance spatial bandwidth (pixels).
    pub theta_alpha: f64,
    /// Appearance intensity bandwidth.
    pub theta_beta: f64,
    /// Smoothness spatial bandwidth (pixels).
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Largest pixel count the dense message passing will accept.
    #[serde(default = "default_pixel_cap")]
    pub pixel_cap: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w1: 1.0,
            w2: 1.0,
            theta_alpha: 3.0,
            theta_beta: 0.1,
            theta_gamma: 3.0,
            iterations: 5,
            pixel_cap: default_pixel_cap(),
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("w1", self.w1), ("w2", self.w2)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParam("iterations must be >= 1".into()));
        }
        if self.pixel_cap == 0 {
            return Err(Error::InvalidParam("pixel cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Binary labeling problem over arbitrary pixel sites.
pub struct CrfProblem {
    /// Negative log-probabilities per site, `[background, foreground]`.
    pub unary: Vec<[f64; 2]>,
    /// Site positions (row, col).
    pub positions: Vec<[f64; 2]>,
    pub intensities: Vec<f64>,
    /// Label compatibility; Potts by default (penalize disagreement).
    pub mu: [[f64; 2]; 2],
}

/// ψ_u(l) = −log P(l) from foreground probabilities, clamped away from 0/1.
pub fn unary_from_probs(probs: &Tensor) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(probs.numel());
    for &p in probs.iter() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
        }
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        out.push([-(1.0 - p).ln(), -p.ln()]);
    }
    Ok(out)
}

impl CrfProblem {
    /// Build a grid problem from a probability map and an intensity image of
    /// the same shape.
    pub fn from_slice(probs: &Tensor, intensity: &Tensor) -> Result<Self> {
        let (h, w) = probs.dims2()?;
        let (ih, iw) = intensity.dims2()?;
        if (h, w) != (ih, iw) {
            return Err(Error::ShapeMismatch(format!(
                "probability map {h}x{w} vs intensity image {ih}x{iw}"
            )));
        }
        Ok(CrfProblem {
            unary: unary_from_probs(probs)?,
            positions: (0..h * w).map(|i| [(i / w) as f64, (i % w) as f64]).collect(),
            intensities: intensity.data().to_vec(),
            mu: [[0.0, 1.0], [1.0, 0.0]],
        })
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }
}

pub fn pairwise_kernel(i: usize, j: usize, problem: &CrfProblem, params: &CrfParams) -> f64 {
    let dp = {
        let (a, b) = (problem.positions[i], problem.positions[j]);
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
    };
    let di = (problem.intensities[i] - problem.intensities[j]).powi(2);
    params.w1
        * (-dp / (2.0 * params.theta_alpha * params.theta_alpha)
            - di / (2.0 * params.theta_beta * params.theta_beta))
            .exp()
        + params.w2 * (-dp / (2.0 * params.theta_gamma * params.theta_gamma)).exp()
}

/// One synchronous mean-field update:
/// Q'_i(l) ∝ exp(−ψ_u(i,l) − Σ_{l'} μ(l,l') Σ_{j≠i} k(i,j) Q_j(l')).
pub fn mean_field_step(
    q: &[[f64; 2]],
    problem: &CrfProblem,
    params: &CrfParams,
) -> Result<Vec<[f64; 2]>> {
    let n = problem.len();
    if q.len() != n {
        return Err(Error::ShapeMismatch(format!("{} marginals for {n} sites", q.len())));
    }
    if n > params.pixel_cap {
        return Err(Error::SizeCap { size: n, cap: params.pixel_cap });
    }
    let mut next = Vec::with_capacity(n);
    for i in 0..n {
        // message: kernel-weighted vote mass per source label
        let mut s = [0.0f64; 2];
        for j in 0..n {
            if j == i {
                continue;
            }
            let k = pairwise_kernel(i, j, problem, params);
            s[0] += k * q[j][0];
            s[1] += k * q[j][1];
        }
        let mut logits = [0.0f64; 2];
        for l in 0..2 {
            let pair = problem.mu[l][0] * s[0] + problem.mu[l][1] * s[1];
            logits[l] = -problem.unary[i][l] - pair;
        }
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let z = e[0] + e[1];
        next.push([e[0] / z, e[1] / z]);
    }
    Ok(next)
}

/// Run mean-field from the unary marginals and return per-site MAP labels
/// (ties go to background).
pub fn mean_field_map(problem: &CrfProblem, params: &CrfParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut q: Vec<[f64; 2]> = problem
        .unary
        .iter()
        .map(|u| {
            let m = (-u[0]).max(-u[1]);
            let e = [(-u[0] - m).exp(), (-u[1] - m).exp()];
            let z = e[0] + e[1];
            [e[0] / z, e[1] / z]
        })
        .collect();
    for _ in 0..params.iterations {
        q = mean_field_step(&q, problem, params)?;
    }
    Ok(q.iter().map(|qi| u8::from(qi[1] > qi[0])).collect())
}

/// Refine a probability map against its intensity image; returns a 0/1 mask.
pub fn crf_refine(probs: &Tensor, intensity: &Tensor, params: &CrfParams) -> Result<Tensor> {
    let (h, w) = probs.dims2()?;
    let problem = CrfProblem::from_slice(probs, intensity)?;
    let labels = mean_field_map(&problem, params)?;
    Tensor::new(vec![h, w], labels.iter().map(|&l| l as f64).collect())
}

/// Like [`crf_refine`], but large slices are shrunk under the pixel cap,
/// refined there, and the labels scaled back up nearest-neighbor.
pub fn crf_refine_budgeted(
    probs: &Tensor,
    intensity: &Tensor,
    params: &CrfParams,
) -> Result<Tensor> {
    let (h, w) = probs.dims2()?;
    if h * w <= params.pixel_cap {
        return crf_refine(probs, intensity, params);
    }
    let scale = (params.pixel_cap as f64 / (h * w) as f64).sqrt();
    let (sh, sw) = (((h as f64 * scale) as usize).max(1), ((w as f64 * scale) as usize).max(1));
    let small = crf_refine(
        &resize_bilinear(probs, sh, sw)?,
        &resize_bilinear(intensity, sh, sw)?,
        params,
    )?;
    resize_nearest(&small, h, w)
}

/// Exact Gibbs energy of a complete labeling:
/// Σ_i ψ_u(x_i) + Σ_{i<j} μ(x_i, x_j) · k(f_i, f_j).
pub fn gibbs_energy(labels: &[u8], problem: &CrfProblem, params: &CrfParams) -> Result<f64> {
    let n = problem.len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} sites", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    let mut e = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        e += problem.unary[i][l as usize];
    }
    for i in 0..n {
        for j in i + 1..n {
            let mu = problem.mu[labels[i] as usize][labels[j] as usize];
            if mu != 0.0 {
                e += mu * pairwise_kernel(i, j, problem, params);
            }
        }
    }
    Ok(e)
}

/// Brute-force MAP over all 2^N labelings; ties resolved to the
/// lexicographically smallest labeling. Only for tiny problems (N ≤ 20).
pub fn exhaustive_map(problem: &CrfProblem, params: &CrfParams) -> Result<Vec<u8>> {
    let n = problem.len();
    if n > 20 {
        return Err(Error::SizeCap { size: n, cap: 20 });
    }
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut labels = vec![0u8; n];
    for m in 0u32..1u32 << n {
        for (i, l) in labels.iter_mut().enumerate() {
            *l = ((m >> (n - 1 - i)) & 1) as u8;
        }
        let e = gibbs_energy(&labels, problem, params)?;
        if best.as_ref().is_none_or(|(be, _)| e < *be) {
            best = Some((e, labels.clone()));
        }
    }
    Ok(best.expect("at least the empty labeling was scored").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_problem(probs: &[f64], positions: &[[f64; 2]], intensities: &[f64]) -> CrfProblem {
        CrfProblem {
            unary: unary_from_probs(&Tensor::new(vec![probs.len()], probs.to_vec()).unwrap())
                .unwrap(),
            positions: positions.to_vec(),
            intensities: intensities.to_vec(),
            mu: [[0.0, 1.0], [1.0, 0.0]],
        }
    }

    #[test]
    fn unary_values() {
        let u = unary_from_probs(&Tensor::new(vec![3], vec![0.5, 1.0, 0.2]).unwrap()).unwrap();
        assert!((u[0][0] - 2f64.ln()).abs() < 1e-12);
        assert!((u[0][1] - 2f64.ln()).abs() < 1e-12);
        assert!(u[1][1] < 1e-6); // confident foreground: near-zero cost
        assert!(u[1][0] > 10.0);
        // argmax of −ψ is the 0.5 threshold
        assert!(u[2][0] < u[2][1]);
        assert!(unary_from_probs(&Tensor::new(vec![1], vec![1.2]).unwrap()).is_err());
    }

    #[test]
    fn kernel_closed_forms() {
        let params = CrfParams::default();
        let prob = toy_problem(
            &[0.5, 0.5, 0.5],
            &[[0.0, 0.0], [3.0, 3.0], [1e6, 0.0]],
            &[0.4, 0.4, 0.4],
        );
        // coincident sites: both exponents vanish
        assert_eq!(pairwise_kernel(0, 0, &prob, &params), params.w1 + params.w2);
        // |Δp|² = 18 = 2θ² for both bandwidths, equal intensities
        let k = pairwise_kernel(0, 1, &prob, &params);
        assert!((k - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
        // far separation
        assert!(pairwise_kernel(0, 2, &prob, &params) < 1e-300);
    }

    #[test]
    fn kernel_is_symmetric() {
        let params = CrfParams::default();
        let prob = toy_problem(
            &[0.3, 0.8, 0.6, 0.1],
            &[[0.0, 1.0], [2.0, 0.5], [1.3, 4.0], [5.0, 5.0]],
            &[0.1, 0.9, 0.4, 0.3],
        );
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(
                    pairwise_kernel(i, j, &prob, &params),
                    pairwise_kernel(j, i, &prob, &params)
                );
            }
        }
    }

    #[test]
    fn zero_kernels_reduce_to_unary_softmax() {
        let params = CrfParams { w1: 0.0, w2: 0.0, ..CrfParams::default() };
        let prob = toy_problem(
            &[0.9, 0.3],
            &[[0.0, 0.0], [0.0, 1.0]],
            &[0.5, 0.5],
        );
        let from_uniform = mean_field_step(&[[0.5, 0.5], [0.5, 0.5]], &prob, &params).unwrap();
        let from_skewed = mean_field_step(&[[0.99, 0.01], [0.2, 0.8]], &prob, &params).unwrap();
        for (a, b) in from_uniform.iter().zip(from_skewed.iter()) {
            assert!((a[0] - b[0]).abs() < 1e-15);
        }
        // recovers the (clamped) input probabilities
        assert!((from_uniform[0][1] - 0.9).abs() < 1e-9);
        assert!((from_uniform[1][1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn symmetric_two_pixel_problem_stays_symmetric() {
        let params = CrfParams::default();
        let prob = toy_problem(&[0.7, 0.7], &[[0.0, 0.0], [0.0, 1.0]], &[0.5, 0.5]);
        let q = mean_field_step(&[[0.3, 0.7], [0.3, 0.7]], &prob, &params).unwrap();
        assert_eq!(q[0], q[1]);
    }

    #[test]
    fn three_pixel_step_matches_hand_computation() {
        let params = CrfParams {
            w1: 0.5,
            w2: 1.5,
            theta_alpha: 2.0,
            theta_beta: 0.2,
            theta_gamma: 1.0,
            iterations: 1,
            pixel_cap: 4096,
        };
        let probs = [0.8, 0.4, 0.6];
        let positions = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let intensities = [0.2, 0.3, 0.9];
        let prob = toy_problem(&probs, &positions, &intensities);
        let q0 = [[0.2, 0.8], [0.6, 0.4], [0.4, 0.6]];
        let got = mean_field_step(&q0, &prob, &params).unwrap();

        // scalar re-derivation, no loops shared with the implementation
        let kf = |dp2: f64, di2: f64| {
            0.5 * (-dp2 / 8.0 - di2 / 0.08).exp() + 1.5 * (-dp2 / 2.0).exp()
        };
        let k01 = kf(1.0, 0.01);
        let k02 = kf(1.0, 0.49);
        let k12 = kf(2.0, 0.36);
        let hand = |u: [f64; 2], s_bg: f64, s_fg: f64| {
            // Potts: label l is penalized by mass on the other label
            let e_bg = (-u[0] - s_fg).exp();
            let e_fg = (-u[1] - s_bg).exp();
            [e_bg / (e_bg + e_fg), e_fg / (e_bg + e_fg)]
        };
        let want0 = hand(prob.unary[0], k01 * q0[1][0] + k02 * q0[2][0], k01 * q0[1][1] + k02 * q0[2][1]);
        let want1 = hand(prob.unary[1], k01 * q0[0][0] + k12 * q0[2][0], k01 * q0[0][1] + k12 * q0[2][1]);
        let want2 = hand(prob.unary[2], k02 * q0[0][0] + k12 * q0[1][0], k02 * q0[0][1] + k12 * q0[1][1]);
        for (g, w) in got.iter().zip([want0, want1, want2].iter()) {
            assert!((g[0] - w[0]).abs() < 1e-12 && (g[1] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_with_zero_weights_is_thresholding() {
        let params = CrfParams { w1: 0.0, w2: 0.0, iterations: 3, ..CrfParams::default() };
        let mut state = 7u64;
        let probs = Tensor::from_fn(&[6, 5], |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        let intensity = Tensor::zeros(&[6, 5]);
        let out = crf_refine(&probs, &intensity, &params).unwrap();
        for (o, p) in out.iter().zip(probs.iter()) {
            assert_eq!(*o, f64::from(*p > 0.5));
        }
    }

    #[test]
    fn lone_flipped_pixel_is_healed() {
        // confident foreground everywhere except one doubting pixel in the middle
        let probs = Tensor::from_fn(&[8, 8], |i| if i == 27 { 0.2 } else { 0.9 });
        let intensity = Tensor::full(&[8, 8], 0.5);
        let params = CrfParams { w2: 2.0, ..CrfParams::default() };
        let out = crf_refine(&probs, &intensity, &params).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));

        // and the healed labeling beats the unary argmax on energy
        let problem = CrfProblem::from_slice(&probs, &intensity).unwrap();
        let unary_argmax: Vec<u8> = probs.iter().map(|&p| u8::from(p > 0.5)).collect();
        let healed = vec![1u8; 64];
        let e_healed = gibbs_energy(&healed, &problem, &params).unwrap();
        let e_argmax = gibbs_energy(&unary_argmax, &problem, &params).unwrap();
        assert!(e_healed < e_argmax, "{e_healed} !< {e_argmax}");
    }

    #[test]
    fn two_pixel_energies_by_hand() {
        let params = CrfParams::default();
        let prob = toy_problem(&[0.8, 0.3], &[[0.0, 0.0], [0.0, 2.0]], &[0.5, 0.6]);
        let k = pairwise_kernel(0, 1, &prob, &params);
        let u = &prob.unary;
        let cases = [
            (vec![0u8, 0], u[0][0] + u[1][0]),
            (vec![0, 1], u[0][0] + u[1][1] + k),
            (vec![1, 0], u[0][1] + u[1][0] + k),
            (vec![1, 1], u[0][1] + u[1][1]),
        ];
        for (labels, want) in cases {
            assert!((gibbs_energy(&labels, &prob, &params).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn exhaustive_is_per_pixel_argmax_without_pairwise() {
        let params = CrfParams { w1: 0.0, w2: 0.0, ..CrfParams::default() };
        let prob = toy_problem(
            &[0.9, 0.1, 0.6, 0.4],
            &[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]],
            &[0.1, 0.2, 0.3, 0.4],
        );
        assert_eq!(exhaustive_map(&prob, &params).unwrap(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn mean_field_matches_exhaustive_on_peaked_problems() {
        let mut state = 99u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        // moderate couplings on spread-out sites: the regime where mean-field
        // reliably lands on the exact optimum
        let params = CrfParams {
            w1: 0.5,
            w2: 0.5,
            theta_alpha: 1.5,
            theta_gamma: 1.5,
            ..CrfParams::default()
        };
        for n in 2..=12usize {
            for _ in 0..3 {
                // distinct grid sites, like pixels of an actual image
                let mut cells: Vec<usize> = (0..81).collect();
                for i in 0..n {
                    let j = i + (rnd() * (81 - i) as f64) as usize;
                    cells.swap(i, j.min(80));
                }
                let positions: Vec<[f64; 2]> =
                    cells[..n].iter().map(|&c| [(c / 9) as f64, (c % 9) as f64]).collect();
                let labels: Vec<bool> = (0..n).map(|_| rnd() < 0.5).collect();
                let probs: Vec<f64> = labels
                    .iter()
                    .map(|&fg| {
                        let conf = 0.9 + 0.09 * rnd();
                        if fg { conf } else { 1.0 - conf }
                    })
                    .collect();
                // intensities consistent with the labels
                let intensities: Vec<f64> = labels
                    .iter()
                    .map(|&fg| if fg { 0.65 + 0.3 * rnd() } else { 0.05 + 0.3 * rnd() })
                    .collect();
                let prob = toy_problem(&probs, &positions, &intensities);
                let mf = mean_field_map(&prob, &params).unwrap();
                let ex = exhaustive_map(&prob, &params).unwrap();
                assert_eq!(mf, ex, "n={n} probs={probs:?}");
            }
        }
    }

    #[test]
    fn size_limits_are_enforced() {
        let params = CrfParams { pixel_cap: 10, ..CrfParams::default() };
        let probs = Tensor::full(&[4, 4], 0.5);
        let intensity = Tensor::zeros(&[4, 4]);
        assert!(matches!(
            crf_refine(&probs, &intensity, &params),
            Err(Error::SizeCap { size: 16, cap: 10 })
        ));

        let big = toy_problem(
            &vec![0.5; 21],
            &(0..21).map(|i| [i as f64, 0.0]).collect::<Vec<_>>(),
            &vec![0.0; 21],
        );
        assert!(matches!(exhaustive_map(&big, &CrfParams::default()), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn budgeted_path_downscales_and_comes_back() {
        let params = CrfParams { pixel_cap: 256, ..CrfParams::default() };
        let probs = Tensor::from_fn(&[40, 40], |i| {
            let (r, c) = ((i / 40) as f64, (i % 40) as f64);
            if (r - 20.0).powi(2) + (c - 20.0).powi(2) <= 100.0 { 0.9 } else { 0.1 }
        });
        let intensity = probs.map(|v| v * 0.5);
        let out = crf_refine_budgeted(&probs, &intensity, &params).unwrap();
        assert_eq!(out.shape(), &[40, 40]);
        assert!(out.is_binary());
        // the confident disk survives the round trip
        assert_eq!(out.at(&[20, 20]), 1.0);
        assert_eq!(out.at(&[0, 0]), 0.0);
        let again = crf_refine_budgeted(&probs, &intensity, &params).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = CrfParams::default();
        p.theta_beta = 0.0;
        assert!(p.validate().is_err());
        let mut p = CrfParams::default();
        p.iterations = 0;
        assert!(p.validate().is_err());
        let mut p = CrfParams::default();
        p.w1 = -1.0;
        assert!(p.validate().is_err());
        assert!(CrfParams::default().validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn marginals_stay_on_the_simplex(seed in 0u64..500) {
            let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(3);
            let mut rnd = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let n = 2 + (rnd() * 8.0) as usize;
            let probs: Vec<f64> = (0..n).map(|_| rnd()).collect();
            let positions: Vec<[f64; 2]> = (0..n).map(|_| [rnd() * 5.0, rnd() * 5.0]).collect();
            let intensities: Vec<f64> = (0..n).map(|_| rnd()).collect();
            let prob = toy_problem(&probs, &positions, &intensities);
            let mut q: Vec<[f64; 2]> = probs.iter().map(|&p| [1.0 - p, p]).collect();
            for _ in 0..3 {
                q = mean_field_step(&q, &prob, &CrfParams::default()).unwrap();
                for qi in &q {
                    prop_assert!(qi[0] >= 0.0 && qi[1] >= 0.0);
                    prop_assert!((qi[0] + qi[1] - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
