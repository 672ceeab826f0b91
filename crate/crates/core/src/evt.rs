//! Extreme-value calibration of prototype distances.
//!
//! For each class, the largest distances between correctly classified
//! training embeddings and their prototype are fitted with a shifted
//! Weibull by maximum likelihood. The Weibull CDF of a virtual sample's
//! distance is its OOD confidence ω; within a mini-batch ω is divided by
//! its mean to give the loss weight ω̄.

use serde::{Deserialize, Serialize};

use crate::augment::VirtualSample;
use crate::error::{Error, Result};
use crate::metric::{argmin, sq_euclidean, PrototypeSet};

pub const SHAPE_MIN: f64 = 0.05;
pub const SHAPE_MAX: f64 = 50.0;
const NEWTON_MAX_ITER: usize = 100;
/// ω assigned to samples of classes whose tail model could not be fitted.
pub const FALLBACK_OMEGA: f64 = 0.5;
const MIN_TAIL: usize = 3;

/// Per-class shifted Weibull tail model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvtModel {
    pub class: usize,
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub tail_size: usize,
    pub valid: bool,
}

impl EvtModel {
    fn invalid(class: usize, tail_size: usize) -> Self {
        Self {
            class,
            mu: 0.0,
            sigma: 0.0,
            xi: 0.0,
            tail_size,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Newton,
    GoldenSection,
}

/// Two-parameter Weibull maximum-likelihood estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullFit {
    pub shape: f64,
    pub scale: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub method: FitMethod,
}

/// Weibull log-likelihood of positive observations.
pub fn weibull_log_likelihood(x: &[f64], shape: f64, scale: f64) -> f64 {
    let (ls, lsc) = (shape.ln(), scale.ln());
    x.iter()
        .map(|&v| {
            let lz = v.ln() - lsc;
            ls - lsc + (shape - 1.0) * lz - (shape * lz).exp()
        })
        .sum()
}

/// Power sums of `y = x / max(x)` (so `y^ξ` cannot overflow):
/// `(Σ y^ξ, Σ y^ξ ln y, Σ y^ξ ln² y)`.
fn power_sums(log_y: &[f64], xi: f64) -> (f64, f64, f64) {
    log_y.iter().fold((0.0, 0.0, 0.0), |(s0, s1, s2), &l| {
        let p = (xi * l).exp();
        (s0 + p, s1 + p * l, s2 + p * l * l)
    })
}

/// Profile score in ξ; its root is the shape MLE. Strictly increasing.
fn shape_score(log_y: &[f64], mean_log_y: f64, xi: f64) -> (f64, f64) {
    let (s0, s1, s2) = power_sums(log_y, xi);
    let r = s1 / s0;
    let g = r - 1.0 / xi - mean_log_y;
    let dg = s2 / s0 - r * r + 1.0 / (xi * xi);
    (g, dg)
}

/// Log-likelihood maximized over scale for a fixed shape (up to the
/// constant `−Σ ln max`).
fn profile_log_likelihood(log_y: &[f64], sum_log_y: f64, xi: f64) -> f64 {
    let n = log_y.len() as f64;
    let (s0, _, _) = power_sums(log_y, xi);
    n * xi.ln() + (xi - 1.0) * sum_log_y - n * (s0 / n).ln() - n
}

fn moment_shape(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let cv = var.sqrt() / mean;
    // Standard power-law approximation to the coefficient-of-variation
    // relation of the Weibull.
    let k = cv.powf(-1.086);
    if k.is_finite() {
        k.clamp(SHAPE_MIN, SHAPE_MAX)
    } else {
        1.0
    }
}

fn newton_shape(log_y: &[f64], mean_log_y: f64, start: f64) -> Option<(f64, usize)> {
    let (mut lo, mut hi) = (SHAPE_MIN, SHAPE_MAX);
    if shape_score(log_y, mean_log_y, lo).0 > 0.0 || shape_score(log_y, mean_log_y, hi).0 < 0.0 {
        return None;
    }
    let mut xi = start;
    for iter in 1..=NEWTON_MAX_ITER {
        let (g, dg) = shape_score(log_y, mean_log_y, xi);
        if !g.is_finite() || !dg.is_finite() {
            return None;
        }
        if g == 0.0 {
            return Some((xi, iter));
        }
        if g < 0.0 {
            lo = xi;
        } else {
            hi = xi;
        }
        let mut next = xi - g / dg;
        if !(next > lo && next < hi) || dg <= 0.0 {
            next = 0.5 * (lo + hi);
        }
        if (next - xi).abs() <= 1e-13 * xi || hi - lo <= 1e-13 * xi {
            return Some((next, iter));
        }
        xi = next;
    }
    None
}

fn golden_shape(log_y: &[f64], sum_log_y: f64) -> Option<f64> {
    let f = |t: f64| profile_log_likelihood(log_y, sum_log_y, t.exp());
    let (mut a, mut b) = (SHAPE_MIN.ln(), SHAPE_MAX.ln());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    let xi = t.exp();
    // An optimum pinned to the bracket edge is not an interior MLE.
    let at_edge = (t - SHAPE_MIN.ln()).abs() < 1e-6 || (t - SHAPE_MAX.ln()).abs() < 1e-6;
    (xi.is_finite() && !at_edge).then_some(xi)
}

/// Two-parameter Weibull MLE (location fixed at 0). Needs at least three
/// positive, finite, not-all-equal observations.
pub fn weibull_mle(x: &[f64]) -> Option<WeibullFit> {
    if x.len() < MIN_TAIL || !x.iter().all(|&v| v.is_finite() && v > 0.0) {
        return None;
    }
    let max = x.iter().copied().fold(f64::MIN, f64::max);
    let min = x.iter().copied().fold(f64::MAX, f64::min);
    if max == min {
        return None;
    }
    let log_max = max.ln();
    let log_y: Vec<f64> = x.iter().map(|v| v.ln() - log_max).collect();
    let sum_log_y: f64 = log_y.iter().sum();
    let mean_log_y = sum_log_y / x.len() as f64;

    let (shape, iterations, method) = match newton_shape(&log_y, mean_log_y, moment_shape(x)) {
        Some((xi, it)) => (xi, it, FitMethod::Newton),
        None => (golden_shape(&log_y, sum_log_y)?, 0, FitMethod::GoldenSection),
    };
    let (s0, _, _) = power_sums(&log_y, shape);
    let scale = max * (s0 / x.len() as f64).powf(1.0 / shape);
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    Some(WeibullFit {
        shape,
        scale,
        log_likelihood: weibull_log_likelihood(x, shape, scale),
        iterations,
        method,
    })
}

/// Location used for a tail: just below its smallest value.
pub fn tail_location(tail: &[f64]) -> f64 {
    let max = tail.iter().copied().fold(f64::MIN, f64::max);
    let min = tail.iter().copied().fold(f64::MAX, f64::min);
    min - (1e-3 * (max - min)).max(1e-6)
}

/// Fit the `tau` largest values of `tail` with a Weibull shifted to sit
/// just below the smallest of them. Degenerate input yields an invalid
/// model rather than an error.
pub fn weibull_fit_high(tail: &[f64], tau: usize, class: usize) -> EvtModel {
    let mut top: Vec<f64> = tail.iter().copied().filter(|v| v.is_finite()).collect();
    top.sort_by(|a, b| b.total_cmp(a));
    top.truncate(tau);
    if top.len() < MIN_TAIL || top.first() == top.last() {
        return EvtModel::invalid(class, top.len());
    }
    let mu = tail_location(&top);
    let shifted: Vec<f64> = top.iter().map(|v| v - mu).collect();
    match weibull_mle(&shifted) {
        Some(fit) => EvtModel {
            class,
            mu,
            sigma: fit.scale,
            xi: fit.shape,
            tail_size: top.len(),
            valid: true,
        },
        None => EvtModel::invalid(class, top.len()),
    }
}

/// For each class, the `tau` largest prototype distances among training
/// embeddings of that class that the prototypes classify correctly,
/// sorted descending. Classes with fewer than three such samples get an
/// empty tail.
pub fn collect_tail_distances(
    embeddings: &[(Vec<f64>, usize)],
    protos: &PrototypeSet,
    tau: usize,
) -> Result<Vec<Vec<f64>>> {
    if tau == 0 {
        return Err(Error::Config("tail size must be at least 1".into()));
    }
    let mut tails: Vec<Vec<f64>> = vec![Vec::new(); protos.num_classes()];
    for (z, y) in embeddings {
        let d = protos.distances(z)?;
        if argmin(&d) == *y {
            tails[*y].push(d[*y]);
        }
    }
    for t in &mut tails {
        if t.len() < MIN_TAIL {
            t.clear();
            continue;
        }
        t.sort_by(|a, b| b.total_cmp(a));
        t.truncate(tau);
    }
    Ok(tails)
}

/// Tail collection plus one fit per class.
pub fn fit_class_models(
    embeddings: &[(Vec<f64>, usize)],
    protos: &PrototypeSet,
    tau: usize,
) -> Result<Vec<EvtModel>> {
    Ok(collect_tail_distances(embeddings, protos, tau)?
        .iter()
        .enumerate()
        .map(|(k, tail)| weibull_fit_high(tail, tau, k))
        .collect())
}

/// Weibull CDF of distance `d`: `1 − exp(−((d − μ)/σ)^ξ)`, zero at or
/// below μ.
pub fn ood_confidence(d: f64, model: &EvtModel) -> Result<f64> {
    if !model.valid {
        return Err(Error::contract(format!(
            "confidence requested from invalid EVT model of class {}",
            model.class
        )));
    }
    if d <= model.mu {
        return Ok(0.0);
    }
    let log_arg = model.xi * ((d - model.mu).ln() - model.sigma.ln());
    Ok(-(-log_arg.exp()).exp_m1())
}

/// Generalized Pareto CDF `1 − (1 + ξ(x − μ)/σ)^{−1/ξ}`, with the
/// exponential limit for |ξ| < 1e−8.
pub fn gpd_cdf(x: f64, mu: f64, sigma: f64, xi: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Domain(format!("GPD scale must be positive, got {sigma}")));
    }
    if x < mu {
        return Err(Error::Domain(format!("x = {x} below location {mu}")));
    }
    let z = (x - mu) / sigma;
    if xi.abs() < 1e-8 {
        return Ok(-(-z).exp_m1());
    }
    let base = 1.0 + xi * z;
    if base.is_nan() || base <= 0.0 {
        return Err(Error::Domain(format!(
            "1 + xi (x - mu) / sigma = {base} is outside the support"
        )));
    }
    Ok(-(-(xi * z).ln_1p() / xi).exp_m1())
}

/// Fill `omega` for each sample from its class model and distance to its
/// class prototype; classes without a valid model get [`FALLBACK_OMEGA`].
pub fn score_samples(
    samples: &mut [VirtualSample],
    protos: &PrototypeSet,
    models: &[EvtModel],
) -> Result<()> {
    for s in samples {
        let model = &models[s.label];
        s.omega = if model.valid {
            ood_confidence(sq_euclidean(&s.z, &protos.prototypes[s.label])?, model)?
        } else {
            FALLBACK_OMEGA
        };
    }
    Ok(())
}

/// `ω̄_i = ω_i / max(mean ω, 1e−8)` over the batch.
pub fn normalize_weights(batch: &mut [VirtualSample]) {
    if batch.is_empty() {
        return;
    }
    let mean = batch.iter().map(|s| s.omega).sum::<f64>() / batch.len() as f64;
    let denom = mean.max(1e-8);
    for s in batch {
        s.omega_bar = s.omega / denom;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Weibull};

    fn model(mu: f64, sigma: f64, xi: f64) -> EvtModel {
        EvtModel {
            class: 0,
            mu,
            sigma,
            xi,
            tail_size: 10,
            valid: true,
        }
    }

    fn sample(omega: f64) -> VirtualSample {
        VirtualSample {
            z: vec![],
            label: 0,
            lambda: 1.0,
            sources: (0, 0),
            omega,
            omega_bar: 0.0,
        }
    }

    fn weibull_draws(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Weibull::new(3.0, 2.0).unwrap();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Full 2-D grid of the log-likelihood, log-spaced in both axes.
    fn grid_best(x: &[f64], scale_hat: f64, steps: usize) -> f64 {
        let n = x.len() as f64;
        let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let sum_log: f64 = logs.iter().sum();
        let mut best = f64::NEG_INFINITY;
        for a in 0..steps {
            let xi = (SHAPE_MIN.ln() + (SHAPE_MAX / SHAPE_MIN).ln() * a as f64 / (steps - 1) as f64).exp();
            let s0: f64 = logs.iter().map(|l| (xi * l).exp()).sum();
            for b in 0..steps {
                let sigma = scale_hat * (0.1f64.ln() + 100f64.ln() * b as f64 / (steps - 1) as f64).exp();
                let ll = n * xi.ln() - n * xi * sigma.ln() + (xi - 1.0) * sum_log - s0 * sigma.powf(-xi);
                best = best.max(ll);
            }
        }
        best
    }

    #[test]
    fn recovers_shape_and_scale() {
        let (mut shapes, mut scales) = (0.0, 0.0);
        for seed in 0..10 {
            let fit = weibull_mle(&weibull_draws(seed, 200)).unwrap();
            shapes += fit.shape;
            scales += fit.scale;
        }
        let (shape, scale) = (shapes / 10.0, scales / 10.0);
        assert!((1.8..=2.2).contains(&shape), "mean shape {shape}");
        assert!((2.85..=3.15).contains(&scale), "mean scale {scale}");
    }

    #[test]
    fn beats_grid_search() {
        let x = weibull_draws(77, 200);
        let fit = weibull_mle(&x).unwrap();
        assert_eq!(fit.method, FitMethod::Newton);
        let grid = grid_best(&x, fit.scale, 2000);
        assert!(fit.log_likelihood >= grid - 1e-6, "{} < {grid}", fit.log_likelihood);
    }

    #[test]
    fn golden_section_agrees_with_newton() {
        let x = weibull_draws(3, 150);
        let fit = weibull_mle(&x).unwrap();
        let logmax = x.iter().copied().fold(f64::MIN, f64::max).ln();
        let ly: Vec<f64> = x.iter().map(|v| v.ln() - logmax).collect();
        let xi = golden_shape(&ly, ly.iter().sum()).unwrap();
        assert!((xi - fit.shape).abs() < 1e-6);
    }

    #[test]
    fn degenerate_tails_are_invalid() {
        assert!(!weibull_fit_high(&[5.0, 5.0, 5.0], 3, 0).valid);
        assert!(!weibull_fit_high(&[1.0, 2.0], 5, 0).valid);
        assert!(!weibull_fit_high(&[], 5, 0).valid);
    }

    #[test]
    fn fit_high_location_sits_below_tail() {
        let tail = [9.0, 7.0, 5.0, 4.5, 4.0, 3.9];
        let m = weibull_fit_high(&tail, 4, 2);
        assert!(m.valid);
        assert_eq!(m.tail_size, 4);
        assert_eq!(m.class, 2);
        assert!((m.mu - (4.5 - 1e-3 * 4.5)).abs() < 1e-12);
        assert!(m.sigma > 0.0 && m.xi > 0.0);
    }

    #[test]
    fn fit_high_is_scale_covariant() {
        let tail = weibull_draws(5, 40);
        let base = weibull_fit_high(&tail, 40, 0);
        for c in [2.0, 17.5, 1000.0] {
            let scaled: Vec<f64> = tail.iter().map(|v| v * c).collect();
            let m = weibull_fit_high(&scaled, 40, 0);
            assert!((m.mu - c * base.mu).abs() <= 1e-9 * (c * base.mu).abs().max(1.0));
            assert!((m.sigma / (c * base.sigma) - 1.0).abs() < 1e-3);
            assert!((m.xi / base.xi - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn fit_high_beats_grid_on_shifted_tail() {
        let tail = weibull_draws(12, 60);
        let m = weibull_fit_high(&tail, 60, 0);
        let shifted: Vec<f64> = tail.iter().map(|v| v - m.mu).collect();
        let ll = weibull_log_likelihood(&shifted, m.xi, m.sigma);
        assert!(ll >= grid_best(&shifted, m.sigma, 600) - 1e-6);
    }

    #[test]
    fn tail_selection() {
        // One-dimensional embeddings around prototype 0 at the origin and a
        // far-away prototype for class 1.
        let protos = PrototypeSet {
            prototypes: vec![vec![0.0], vec![100.0]],
            counts: vec![5, 1],
            epoch: 0,
        };
        let emb: Vec<(Vec<f64>, usize)> = [1.0, 5.0, 3.0, 9.0, 7.0]
            .iter()
            .map(|d: &f64| (vec![d.sqrt()], 0))
            .chain([(vec![0.0], 1), (vec![1.0], 1), (vec![2.0], 1)])
            .collect();
        let tails = collect_tail_distances(&emb, &protos, 3).unwrap();
        let got: Vec<f64> = tails[0].iter().map(|v| (v * 1e9).round() / 1e9).collect();
        assert_eq!(got, vec![9.0, 7.0, 5.0]);
        assert!(tails[1].is_empty(), "all class-1 samples are misclassified");
    }

    #[test]
    fn tail_selection_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let emb: Vec<(Vec<f64>, usize)> = (0..120)
            .map(|i| ((0..3).map(|_| rng.random_range(-2.0..2.0)).collect(), i % 3))
            .collect();
        let protos = crate::metric::compute_prototypes(emb.iter().map(|(z, y)| (z.as_slice(), *y)), 3, 0).unwrap();
        let tails = collect_tail_distances(&emb, &protos, 7).unwrap();
        for k in 0..3 {
            let mut all: Vec<f64> = Vec::new();
            for (z, y) in &emb {
                if *y != k {
                    continue;
                }
                let d: Vec<f64> = protos.prototypes.iter().map(|p| z.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum()).collect();
                let best = (0..3).min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()).unwrap();
                if best == k {
                    all.push(d[k]);
                }
            }
            all.sort_by(|a, b| b.partial_cmp(a).unwrap());
            all.truncate(7);
            if all.len() < 3 {
                all.clear();
            }
            assert_eq!(tails[k], all);
        }
    }

    #[test]
    fn confidence_values() {
        let m = model(1.5, 2.0, 1.7);
        assert_eq!(ood_confidence(1.5, &m).unwrap(), 0.0);
        assert_eq!(ood_confidence(0.2, &m).unwrap(), 0.0);
        assert!((ood_confidence(3.5, &m).unwrap() - (1.0 - (-1f64).exp())).abs() < 1e-15);
        let m2 = model(0.0, 1.0, 2.0);
        assert!((ood_confidence(2.0, &m2).unwrap() - (1.0 - (-4f64).exp())).abs() < 1e-15);
        assert!((ood_confidence(2.0, &m2).unwrap() - 0.98168).abs() < 1e-5);
        assert_eq!(ood_confidence(1e300, &m2).unwrap(), 1.0);
        let mut bad = m2.clone();
        bad.valid = false;
        assert!(matches!(ood_confidence(1.0, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn gpd_values() {
        assert_eq!(gpd_cdf(2.0, 2.0, 1.5, 0.3).unwrap(), 0.0);
        assert!((gpd_cdf(1.0, 0.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let exact = 1.0 - (-0.7f64).exp();
        assert!((gpd_cdf(0.7, 0.0, 1.0, 1e-12).unwrap() - exact).abs() < 1e-8);
        assert!((gpd_cdf(0.7, 0.0, 1.0, 1e-7).unwrap() - exact).abs() < 1e-7);
        assert!(matches!(gpd_cdf(5.0, 0.0, 1.0, -0.5), Err(Error::Domain(_))));
        assert!(matches!(gpd_cdf(-1.0, 0.0, 1.0, 0.5), Err(Error::Domain(_))));
        assert!(matches!(gpd_cdf(1.0, 0.0, 0.0, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn normalization_cases() {
        let mut b: Vec<_> = [0.3, 0.3, 0.3].iter().map(|&w| sample(w)).collect();
        normalize_weights(&mut b);
        assert!(b.iter().all(|s| s.omega_bar == 1.0));
        let mut b = vec![sample(0.2), sample(0.6)];
        normalize_weights(&mut b);
        assert!((b[0].omega_bar - 0.5).abs() < 1e-15 && (b[1].omega_bar - 1.5).abs() < 1e-15);
        let mut b = vec![sample(0.0), sample(0.0)];
        normalize_weights(&mut b);
        assert!(b.iter().all(|s| s.omega_bar == 0.0));
    }

    #[test]
    fn invalid_models_fall_back() {
        let protos = PrototypeSet {
            prototypes: vec![vec![0.0], vec![1.0]],
            counts: vec![1, 1],
            epoch: 0,
        };
        let models = vec![model(0.0, 1.0, 2.0), EvtModel::invalid(1, 0)];
        let mut s = vec![sample(0.0), VirtualSample { label: 1, z: vec![4.0], ..sample(0.0) }];
        s[0].z = vec![1.0];
        score_samples(&mut s, &protos, &models).unwrap();
        assert!((s[0].omega - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert_eq!(s[1].omega, FALLBACK_OMEGA);
    }

    proptest! {
        #[test]
        fn confidence_is_monotone(mu in -5.0f64..5.0, sigma in 0.01f64..10.0, xi in 0.05f64..20.0) {
            let m = model(mu, sigma, xi);
            let mut prev = 0.0;
            for i in 0..1000 {
                let d = mu - 1.0 + i as f64 * (10.0 * sigma) / 999.0;
                let w = ood_confidence(d, &m).unwrap();
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert!(w >= prev);
                prev = w;
            }
        }

        #[test]
        fn normalized_weights_sum_to_batch_size(ws in prop::collection::vec(0.0f64..1.0, 1..64)) {
            prop_assume!(ws.iter().sum::<f64>() > 1e-6);
            let mut b: Vec<_> = ws.iter().map(|&w| sample(w)).collect();
            normalize_weights(&mut b);
            let total: f64 = b.iter().map(|s| s.omega_bar).sum();
            prop_assert!((total - b.len() as f64).abs() < 1e-9);
        }
    }
}
