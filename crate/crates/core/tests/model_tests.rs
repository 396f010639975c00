use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Gamma, Normal};

use plategp::datagen::TaskDataset;
use plategp::model::priors::{
    gamma_dlpdf, gamma_lpdf, half_normal_lpdf, ln_gamma, normal_lpdf, uniform_lpdf,
};
use plategp::model::{
    log_joint_mtl_a, log_joint_mtl_b, log_joint_stl, log_prior_stl, sensor_separation, sigmoid,
    softplus, HyperParams, IntertaskParams, LatentNoiseField, MtlATarget, MtlBTarget,
    PriorConstants, StlTarget, Transform,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_task(seed: u64, n: usize) -> TaskDataset {
    let mut r = rng(seed);
    let inputs: Vec<[f64; 2]> = (0..n)
        .map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..0.75)])
        .collect();
    let outputs: Vec<f64> = (0..n).map(|_| r.gen_range(-1.5..1.5)).collect();
    TaskDataset {
        pair_id: (0, 1),
        separation: r.gen_range(0.1..0.9),
        inputs,
        outputs,
        split_mask: vec![true; n],
    }
}

fn random_hypers(r: &mut ChaCha8Rng) -> HyperParams {
    HyperParams {
        alpha: r.gen_range(0.4..1.6),
        lengthscale: r.gen_range(0.3..1.2),
        noise_mean: r.gen_range(-1.5..0.0),
        noise_alpha: r.gen_range(0.4..1.5),
        noise_lengthscale: r.gen_range(0.3..1.2),
    }
}

fn random_noise(r: &mut ChaCha8Rng, n: usize) -> LatentNoiseField {
    LatentNoiseField {
        r_values: (0..n).map(|_| r.gen_range(-1.5..0.5)).collect(),
    }
}

#[test]
fn sensor_separation_examples() {
    assert_eq!(sensor_separation([0.0, 0.0], [0.0, 0.0]), 0.0);
    assert!((sensor_separation([0.0, 0.0], [3.0, 4.0]) - 5.0).abs() < 1e-15);
    // 8 sensors give 28 unordered pairs.
    let mut count = 0;
    for j in 0..8 {
        for _jp in (j + 1)..8 {
            count += 1;
        }
    }
    assert_eq!(count, 28);
}

#[test]
fn softplus_values_and_asymptotes() {
    assert!((softplus(0.0) - 0.6931471805599453).abs() < 1e-12);
    assert!((softplus(100.0) - 100.0).abs() < 1e-9);
    assert!((softplus(-5.0) - 0.006715348489118068).abs() < 1e-12);
    assert!(softplus(-800.0) >= 0.0);
    assert!(softplus(800.0).is_finite());
    assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
}

#[test]
fn ln_gamma_matches_reference() {
    for x in [0.5, 1.0, 2.0, 3.7, 10.2, 0.01] {
        let want = statrs::function::gamma::ln_gamma(x);
        assert!(
            (ln_gamma(x) - want).abs() < 1e-10,
            "ln_gamma({x}) = {} vs {want}",
            ln_gamma(x)
        );
    }
}

#[test]
fn scalar_log_pdfs_match_reference() {
    let g = Gamma::new(2.0, 1.0).unwrap();
    for x in [0.2, 0.5, 1.0, 2.0, 5.0] {
        assert!((gamma_lpdf(x, 2.0, 1.0) - g.ln_pdf(x)).abs() < 1e-10);
    }
    let n = Normal::new(-0.9, 1.0).unwrap();
    for x in [-3.0, -0.9, 0.0, 2.0] {
        assert!((normal_lpdf(x, -0.9, 1.0) - n.ln_pdf(x)).abs() < 1e-12);
    }
    // Half-normal with scale s doubles the N(0, s^2) density on x >= 0.
    let n0 = Normal::new(0.0, 2.0).unwrap();
    for x in [0.1, 1.0, 3.5] {
        assert!((half_normal_lpdf(x, 2.0) - (2.0f64.ln() + n0.ln_pdf(x))).abs() < 1e-12);
    }
    assert_eq!(uniform_lpdf(5.0, 0.0, 10.0), -(10.0f64).ln());
    assert_eq!(uniform_lpdf(-0.1, 0.0, 10.0), f64::NEG_INFINITY);
}

#[test]
fn gamma_prior_peaks_at_one() {
    // Gamma(2,1) has its mode at 1.
    assert!(gamma_lpdf(1.0, 2.0, 1.0) > gamma_lpdf(0.5, 2.0, 1.0));
    assert!(gamma_lpdf(1.0, 2.0, 1.0) > gamma_lpdf(2.0, 2.0, 1.0));
    // The constrained-space score is zero at the mode.
    assert_eq!(gamma_dlpdf(1.0, 2.0, 1.0), 0.0);
}

#[test]
fn stl_prior_at_unit_point_matches_scalar_assembly() {
    // At l = alpha = alpha_r = l_r = 1 every log-Jacobian term ln(x) vanishes,
    // so the prior equals the bare sum of the five scalar log-pdfs.
    let pc = PriorConstants::default();
    let h = HyperParams {
        alpha: 1.0,
        lengthscale: 1.0,
        noise_mean: -0.9,
        noise_alpha: 1.0,
        noise_lengthscale: 1.0,
    };
    let g = Gamma::new(2.0, 1.0).unwrap();
    let n = Normal::new(-0.9, 1.0).unwrap();
    let hn1 = Normal::new(0.0, 1.0).unwrap();
    let hn2 = Normal::new(0.0, 2.0).unwrap();
    let want = g.ln_pdf(1.0)
        + (2.0f64.ln() + hn1.ln_pdf(1.0))
        + n.ln_pdf(-0.9)
        + (2.0f64.ln() + hn2.ln_pdf(1.0))
        + g.ln_pdf(1.0);
    assert!((log_prior_stl(&h, &pc) - want).abs() < 1e-12);
}

#[test]
fn prior_mode_visible_through_log_prior() {
    let pc = PriorConstants::default();
    let at = |l: f64| {
        log_prior_stl(
            &HyperParams {
                alpha: 1.0,
                lengthscale: l,
                noise_mean: -0.9,
                noise_alpha: 1.0,
                noise_lengthscale: 1.0,
            },
            &pc,
        ) - l.ln() // strip the Jacobian to compare constrained densities
    };
    assert!(at(1.0) > at(0.5));
    assert!(at(1.0) > at(2.0));
}

#[test]
fn stl_joint_single_point_matches_hand_assembly() {
    let pc = PriorConstants::default();
    let data = TaskDataset {
        pair_id: (2, 5),
        separation: 0.4,
        inputs: vec![[0.3, 0.2]],
        outputs: vec![0.7],
        split_mask: vec![true],
    };
    let h = HyperParams {
        alpha: 1.2,
        lengthscale: 0.8,
        noise_mean: -0.5,
        noise_alpha: 0.9,
        noise_lengthscale: 1.1,
    };
    let noise = LatentNoiseField {
        r_values: vec![-0.3],
    };
    let b = log_joint_stl(&data, &h, &noise, &pc).unwrap();

    // With one point the noise GP is N(m_r, alpha_r^2) and the marginal
    // likelihood is N(0, alpha^2 + exp(2 r)); the factorization jitter is
    // 1e-9 of the diagonal, far below the 1e-6 tolerance used here.
    let noise_gp = Normal::new(-0.5, 0.9).unwrap().ln_pdf(-0.3);
    let lik_var: f64 = 1.2 * 1.2 + (-0.6f64).exp();
    let lik = Normal::new(0.0, lik_var.sqrt()).unwrap().ln_pdf(0.7);
    let want = log_prior_stl(&h, &pc) + noise_gp + lik;
    assert!(
        (b.total() - want).abs() < 1e-6,
        "{} vs {want}",
        b.total()
    );
}

#[test]
fn stl_joint_terms_are_additive() {
    let pc = PriorConstants::default();
    let data = toy_task(3, 6);
    let mut r = rng(4);
    let h = random_hypers(&mut r);
    let noise = random_noise(&mut r, 6);
    let b = log_joint_stl(&data, &h, &noise, &pc).unwrap();
    assert_eq!(b.intertask_gp, 0.0);
    assert!(
        (b.total() - (b.prior + b.noise_gp + b.likelihood)).abs() < 1e-12,
        "breakdown does not sum"
    );
    assert!((b.prior - log_prior_stl(&h, &pc)).abs() < 1e-12);
}

#[test]
fn stl_likelihood_obeys_gaussian_scaling() {
    // y -> c y with alpha -> c alpha and r -> r + ln c rescales the marginal
    // covariance by c^2, so the likelihood drops by n ln c.
    let pc = PriorConstants::default();
    let data = toy_task(5, 7);
    let mut r = rng(6);
    let h = random_hypers(&mut r);
    let noise = random_noise(&mut r, 7);
    let c: f64 = 2.5;

    let scaled_data = TaskDataset {
        pair_id: data.pair_id,
        separation: data.separation,
        inputs: data.inputs.clone(),
        outputs: data.outputs.iter().map(|y| c * y).collect(),
        split_mask: data.split_mask.clone(),
    };
    let scaled_h = HyperParams {
        alpha: c * h.alpha,
        ..h.clone()
    };
    let scaled_noise = LatentNoiseField {
        r_values: noise.r_values.iter().map(|v| v + c.ln()).collect(),
    };

    let base = log_joint_stl(&data, &h, &noise, &pc).unwrap();
    let scaled = log_joint_stl(&scaled_data, &scaled_h, &scaled_noise, &pc).unwrap();
    let want = base.likelihood - 7.0 * c.ln();
    assert!(
        (scaled.likelihood - want).abs() < 1e-8,
        "{} vs {want}",
        scaled.likelihood
    );
}

#[test]
fn mtl_a_single_task_reduces_to_stl() {
    let pc = PriorConstants::default();
    let data = toy_task(7, 5);
    let mut r = rng(8);
    let h = random_hypers(&mut r);
    let noise = random_noise(&mut r, 5);
    let stl = log_joint_stl(&data, &h, &noise, &pc).unwrap();
    let mtl = log_joint_mtl_a(
        std::slice::from_ref(&data),
        &h,
        std::slice::from_ref(&noise),
        &pc,
    )
    .unwrap();
    assert!((stl.total() - mtl.total()).abs() < 1e-12);
}

#[test]
fn mtl_a_duplicated_task_doubles_the_data_terms() {
    let pc = PriorConstants::default();
    let data = toy_task(9, 5);
    let mut r = rng(10);
    let h = random_hypers(&mut r);
    let noise = random_noise(&mut r, 5);
    let one = log_joint_mtl_a(
        std::slice::from_ref(&data),
        &h,
        std::slice::from_ref(&noise),
        &pc,
    )
    .unwrap();
    let two = log_joint_mtl_a(
        &[data.clone(), data.clone()],
        &h,
        &[noise.clone(), noise.clone()],
        &pc,
    )
    .unwrap();
    assert!((two.likelihood - 2.0 * one.likelihood).abs() < 1e-10);
    assert!((two.noise_gp - 2.0 * one.noise_gp).abs() < 1e-10);
    assert!((two.prior - one.prior).abs() < 1e-12);
}

#[test]
fn mtl_a_matches_per_task_assembly() {
    let pc = PriorConstants::default();
    let datasets: Vec<TaskDataset> = (0..3).map(|i| toy_task(20 + i, 4 + i as usize)).collect();
    let mut r = rng(30);
    let h = random_hypers(&mut r);
    let noises: Vec<LatentNoiseField> = datasets
        .iter()
        .map(|d| random_noise(&mut r, d.len()))
        .collect();
    let joint = log_joint_mtl_a(&datasets, &h, &noises, &pc).unwrap();
    let mut want = log_prior_stl(&h, &pc);
    for (d, nf) in datasets.iter().zip(&noises) {
        let b = log_joint_stl(d, &h, nf, &pc).unwrap();
        want += b.noise_gp + b.likelihood;
    }
    assert!((joint.total() - want).abs() < 1e-10);
}

#[test]
fn mtl_b_constant_latents_reduce_to_shared_hyperparameters() {
    let pc = PriorConstants::default();
    let datasets: Vec<TaskDataset> = (0..3).map(|i| toy_task(40 + i, 5)).collect();
    let seps: Vec<f64> = datasets.iter().map(|d| d.separation).collect();
    let mut r = rng(50);
    let noises: Vec<LatentNoiseField> =
        datasets.iter().map(|d| random_noise(&mut r, d.len())).collect();

    let alpha0: f64 = 1.3;
    let len0: f64 = 0.7;
    // softplus inverse: g with softplus(g) = x is ln(exp(x) - 1).
    let g_const = (alpha0.exp() - 1.0).ln();
    let h_const = (len0.exp() - 1.0).ln();
    let inter = IntertaskParams {
        g_amplitude: 1.0,
        g_lengthscale: 0.5,
        g_slope: 2.0,
        g_intercept: 0.1,
        h_amplitude: 0.8,
        h_lengthscale: 0.6,
        h_slope: 1.0,
        h_intercept: -0.2,
        g_values: vec![g_const; 3],
        h_values: vec![h_const; 3],
    };
    let shared = HyperParams {
        alpha: alpha0,
        lengthscale: len0,
        noise_mean: -0.8,
        noise_alpha: 1.1,
        noise_lengthscale: 0.9,
    };
    let mtl_b = log_joint_mtl_b(&datasets, &seps, &inter, (-0.8, 1.1, 0.9), &noises, &pc).unwrap();
    let mtl_a = log_joint_mtl_a(&datasets, &shared, &noises, &pc).unwrap();
    assert!((mtl_b.likelihood - mtl_a.likelihood).abs() < 1e-8);
    assert!((mtl_b.noise_gp - mtl_a.noise_gp).abs() < 1e-8);
}

#[test]
fn mtl_b_slope_outside_support_is_rejected() {
    let pc = PriorConstants::default();
    let datasets: Vec<TaskDataset> = (0..2).map(|i| toy_task(60 + i, 3)).collect();
    let seps: Vec<f64> = datasets.iter().map(|d| d.separation).collect();
    let mut r = rng(61);
    let noises: Vec<LatentNoiseField> =
        datasets.iter().map(|d| random_noise(&mut r, d.len())).collect();
    let inter = IntertaskParams {
        g_amplitude: 1.0,
        g_lengthscale: 0.5,
        g_slope: 11.0,
        g_intercept: 0.0,
        h_amplitude: 1.0,
        h_lengthscale: 0.5,
        h_slope: 1.0,
        h_intercept: 0.0,
        g_values: vec![0.5, 0.6],
        h_values: vec![0.1, 0.2],
    };
    let b = log_joint_mtl_b(&datasets, &seps, &inter, (-0.9, 1.0, 1.0), &noises, &pc).unwrap();
    assert_eq!(b.total(), f64::NEG_INFINITY);
}

#[test]
fn mtl_b_matches_term_by_term_assembly() {
    // Independent reassembly of every term with dense linear algebra and
    // reference distributions, on a 2-task instance with 2 points per task.
    let pc = PriorConstants::default();
    let datasets: Vec<TaskDataset> = (0..2).map(|i| toy_task(70 + i, 2)).collect();
    let seps = [0.25, 0.6];
    let mut r = rng(71);
    let noises: Vec<LatentNoiseField> =
        datasets.iter().map(|d| random_noise(&mut r, d.len())).collect();
    let inter = IntertaskParams {
        g_amplitude: 1.2,
        g_lengthscale: 0.8,
        g_slope: 3.0,
        g_intercept: 0.4,
        h_amplitude: 0.9,
        h_lengthscale: 0.7,
        h_slope: 1.5,
        h_intercept: -0.3,
        g_values: vec![0.3, 0.9],
        h_values: vec![-0.2, 0.4],
    };
    let (m_r, a_r, l_r) = (-0.7, 1.05, 0.85);
    let got = log_joint_mtl_b(&datasets, &seps, &inter, (m_r, a_r, l_r), &noises, &pc).unwrap();

    let matern = |d: f64, a: f64, l: f64| -> f64 {
        let s = 3.0f64.sqrt() * d / l;
        a * a * (1.0 + s) * (-s).exp()
    };
    let dense_lnorm = |y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>| -> f64 {
        let n = y.len();
        let mut cj = cov.clone();
        let jitter = (1e-9 * cov.diagonal().sum() / n as f64).max(1e-12);
        for i in 0..n {
            cj[(i, i)] += jitter;
        }
        let inv = cj.clone().try_inverse().unwrap();
        let resid = y - mean;
        -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * cj.determinant().ln()
            - 0.5 * (resid.transpose() * inv * &resid)[(0, 0)]
    };

    let gam = Gamma::new(2.0, 1.0).unwrap();
    let npdf = |x: f64, loc: f64, scale: f64| Normal::new(loc, scale).unwrap().ln_pdf(x);
    let mut prior = gam.ln_pdf(inter.g_amplitude) + inter.g_amplitude.ln();
    prior += gam.ln_pdf(inter.g_lengthscale) + inter.g_lengthscale.ln();
    prior += gam.ln_pdf(inter.h_amplitude) + inter.h_amplitude.ln();
    prior += gam.ln_pdf(inter.h_lengthscale) + inter.h_lengthscale.ln();
    prior += -(10.0f64).ln() + ((inter.g_slope - 0.0) * (10.0 - inter.g_slope) / 10.0).ln();
    prior += -(10.0f64).ln() + ((inter.h_slope - 0.0) * (10.0 - inter.h_slope) / 10.0).ln();
    prior += -(2.0f64).ln() + ((inter.g_intercept + 1.0) * (1.0 - inter.g_intercept) / 2.0).ln();
    prior += -(2.0f64).ln() + ((inter.h_intercept + 1.0) * (1.0 - inter.h_intercept) / 2.0).ln();
    prior += npdf(m_r, -0.9, 1.0);
    prior += 2.0f64.ln() + npdf(a_r, 0.0, 2.0) + a_r.ln();
    prior += gam.ln_pdf(l_r) + l_r.ln();
    assert!((got.prior - prior).abs() < 1e-10, "prior {} vs {prior}", got.prior);

    let inter_gp = {
        let mut total = 0.0;
        for (vals, amp, len, slope, icept) in [
            (&inter.g_values, inter.g_amplitude, inter.g_lengthscale, inter.g_slope, inter.g_intercept),
            (&inter.h_values, inter.h_amplitude, inter.h_lengthscale, inter.h_slope, inter.h_intercept),
        ] {
            let mut k = DMatrix::zeros(2, 2);
            for i in 0..2 {
                for j in 0..2 {
                    k[(i, j)] = matern((seps[i] - seps[j]).abs(), amp, len);
                }
            }
            let v = DVector::from_vec(vals.clone());
            let mean = DVector::from_iterator(2, seps.iter().map(|s| slope * s + icept));
            total += dense_lnorm(&v, &mean, &k);
        }
        total
    };
    assert!(
        (got.intertask_gp - inter_gp).abs() < 1e-8,
        "intertask {} vs {inter_gp}",
        got.intertask_gp
    );

    let mut noise_gp = 0.0;
    let mut lik = 0.0;
    for (k, d) in datasets.iter().enumerate() {
        let pts = &d.inputs;
        let dist = |i: usize, j: usize| -> f64 {
            let dx = pts[i][0] - pts[j][0];
            let dy = pts[i][1] - pts[j][1];
            (dx * dx + dy * dy).sqrt()
        };
        let mut kr = DMatrix::zeros(2, 2);
        let alpha_k = softplus(inter.g_values[k]);
        let len_k = softplus(inter.h_values[k]);
        let mut kf = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                kr[(i, j)] = matern(dist(i, j), a_r, l_r);
                kf[(i, j)] = matern(dist(i, j), alpha_k, len_k);
            }
        }
        let rv = DVector::from_vec(noises[k].r_values.clone());
        let rmean = DVector::from_element(2, m_r);
        noise_gp += dense_lnorm(&rv, &rmean, &kr);
        let mut sigma = kf;
        for i in 0..2 {
            let s = noises[k].r_values[i].exp();
            sigma[(i, i)] += s * s;
        }
        let y = DVector::from_vec(d.outputs.clone());
        lik += dense_lnorm(&y, &DVector::zeros(2), &sigma);
    }
    assert!((got.noise_gp - noise_gp).abs() < 1e-8);
    assert!((got.likelihood - lik).abs() < 1e-8);
}

#[test]
fn transform_round_trips() {
    let log = Transform::Log;
    assert_eq!(log.unconstrain(1.0, "alpha").unwrap(), 0.0);
    assert_eq!(log.constrain(0.0), 1.0);
    let slope = Transform::ScaledLogit { lo: 0.0, hi: 10.0 };
    assert!((slope.unconstrain(5.0, "slope").unwrap()).abs() < 1e-12);
    assert!((slope.constrain(0.0) - 5.0).abs() < 1e-12);

    let mut r = rng(80);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x = (r.gen_range(-4.0..4.0f64)).exp();
        let u = log.unconstrain(x, "x").unwrap();
        worst = worst.max((log.constrain(u) - x).abs() / x.max(1.0));

        let s = r.gen_range(0.05..9.95);
        let u = slope.unconstrain(s, "s").unwrap();
        worst = worst.max((slope.constrain(u) - s).abs());

        let icept = Transform::ScaledLogit { lo: -1.0, hi: 1.0 };
        let c = r.gen_range(-0.99..0.99);
        let u = icept.unconstrain(c, "c").unwrap();
        worst = worst.max((icept.constrain(u) - c).abs());
    }
    assert!(worst < 1e-10, "round-trip error {worst}");
}

#[test]
fn transform_rejects_out_of_support() {
    assert!(Transform::Log.unconstrain(0.0, "alpha").is_err());
    assert!(Transform::Log.unconstrain(-2.0, "alpha").is_err());
    let t = Transform::ScaledLogit { lo: 0.0, hi: 10.0 };
    assert!(t.unconstrain(0.0, "slope").is_err());
    assert!(t.unconstrain(10.0, "slope").is_err());
    assert!(t.unconstrain(-1.0, "slope").is_err());
}

#[test]
fn unconstrained_prior_sampling_reproduces_constrained_means() {
    // Inverse-CDF draws of the unconstrained prior density (log-pdf plus
    // log-Jacobian), mapped back through constrain: the half-normal and gamma
    // prior means must reappear.
    let mc_mean = |lpdf: &dyn Fn(f64) -> f64| -> f64 {
        let (lo, hi, m) = (-12.0, 8.0, 4000);
        let step = (hi - lo) / m as f64;
        let us: Vec<f64> = (0..=m).map(|i| lo + step * i as f64).collect();
        let dens: Vec<f64> = us.iter().map(|u| (lpdf(u.exp()) + u).exp()).collect();
        let mut cdf = vec![0.0];
        for i in 1..=m {
            cdf.push(cdf[i - 1] + 0.5 * (dens[i - 1] + dens[i]) * step);
        }
        let total = *cdf.last().unwrap();
        let n = 100_000;
        let mut acc = 0.0;
        let mut j = 0;
        for i in 0..n {
            let target = total * (i as f64 + 0.5) / n as f64;
            while cdf[j + 1] < target {
                j += 1;
            }
            let frac = (target - cdf[j]) / (cdf[j + 1] - cdf[j]);
            let u = us[j] + frac * step;
            acc += u.exp();
        }
        acc / n as f64
    };

    let hn1 = mc_mean(&|x| half_normal_lpdf(x, 1.0));
    assert!((hn1 - 0.7978845608028654).abs() < 0.01, "half-normal(1) mean {hn1}");
    let gam = mc_mean(&|x| gamma_lpdf(x, 2.0, 1.0));
    assert!((gam - 2.0).abs() < 0.02, "gamma(2,1) mean {gam}");
}

fn finite_diff_check(
    dim: usize,
    f: &dyn Fn(&[f64]) -> (f64, DVector<f64>),
    u: &[f64],
) -> f64 {
    let (_, grad) = f(u);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[i] += step;
        dn[i] -= step;
        let fd = (f(&up).0 - f(&dn).0) / (2.0 * step);
        let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn stl_gradient_matches_finite_differences() {
    let pc = PriorConstants::default();
    let data = toy_task(90, 6);
    let target = StlTarget::new(&data, &pc).unwrap();
    let dim = target.layout().dim();
    let mut r = rng(91);
    for _ in 0..8 {
        let u: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        let worst = finite_diff_check(dim, &|v| target.value_and_grad(v).unwrap(), &u);
        assert!(worst < 1e-4, "gradient error {worst}");
    }
}

#[test]
fn mtl_a_gradient_matches_finite_differences() {
    let pc = PriorConstants::default();
    let datasets: Vec<TaskDataset> = (0..3).map(|i| toy_task(100 + i, 4)).collect();
    let target = MtlATarget::new(&datasets, &pc).unwrap();
    let dim = target.layout().dim();
    let mut r = rng(101);
    for _ in 0..8 {
        let u: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        let worst = finite_diff_check(dim, &|v| target.value_and_grad(v).unwrap(), &u);
        assert!(worst < 1e-4, "gradient error {worst}");
    }
}

#[test]
fn mtl_b_gradient_matches_finite_differences() {
    let pc = PriorConstants::default();
    let datasets: Vec<TaskDataset> = (0..4).map(|i| toy_task(110 + i, 4)).collect();
    let target = MtlBTarget::new(&datasets, &pc).unwrap();
    let dim = target.layout().dim();
    let mut r = rng(111);
    for _ in 0..8 {
        let u: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        let worst = finite_diff_check(dim, &|v| target.value_and_grad(v).unwrap(), &u);
        assert!(worst < 1e-4, "gradient error {worst}");
    }
}

#[test]
fn reduction_identities_on_random_instances() {
    let pc = PriorConstants::default();
    let mut r = rng(120);
    for trial in 0..30 {
        let k = r.gen_range(2..4);
        let datasets: Vec<TaskDataset> = (0..k)
            .map(|i| toy_task(1000 + trial * 10 + i as u64, r.gen_range(2..6)))
            .collect();
        let seps: Vec<f64> = datasets.iter().map(|d| d.separation).collect();
        let noises: Vec<LatentNoiseField> = datasets
            .iter()
            .map(|d| random_noise(&mut r, d.len()))
            .collect();
        let h = random_hypers(&mut r);

        // MTL-A with K=1 equals STL.
        let stl = log_joint_stl(&datasets[0], &h, &noises[0], &pc).unwrap();
        let a1 = log_joint_mtl_a(
            std::slice::from_ref(&datasets[0]),
            &h,
            std::slice::from_ref(&noises[0]),
            &pc,
        )
        .unwrap();
        assert!((stl.total() - a1.total()).abs() < 1e-8);

        // MTL-B with constant latent functions matches the MTL-A data terms.
        let g_const = (h.alpha.exp() - 1.0).ln();
        let h_const = (h.lengthscale.exp() - 1.0).ln();
        let inter = IntertaskParams {
            g_amplitude: r.gen_range(0.5..1.5),
            g_lengthscale: r.gen_range(0.3..1.0),
            g_slope: r.gen_range(0.5..9.5),
            g_intercept: r.gen_range(-0.9..0.9),
            h_amplitude: r.gen_range(0.5..1.5),
            h_lengthscale: r.gen_range(0.3..1.0),
            h_slope: r.gen_range(0.5..9.5),
            h_intercept: r.gen_range(-0.9..0.9),
            g_values: vec![g_const; k],
            h_values: vec![h_const; k],
        };
        let b = log_joint_mtl_b(
            &datasets,
            &seps,
            &inter,
            (h.noise_mean, h.noise_alpha, h.noise_lengthscale),
            &noises,
            &pc,
        )
        .unwrap();
        let a = log_joint_mtl_a(&datasets, &h, &noises, &pc).unwrap();
        assert!((b.likelihood - a.likelihood).abs() < 1e-8);
        assert!((b.noise_gp - a.noise_gp).abs() < 1e-8);
    }
}

#[test]
fn targets_reject_malformed_data() {
    let pc = PriorConstants::default();
    let empty = TaskDataset {
        pair_id: (0, 1),
        separation: 0.2,
        inputs: vec![[0.1, 0.1]],
        outputs: vec![0.5],
        split_mask: vec![false],
    };
    assert!(StlTarget::new(&empty, &pc).is_err());
    assert!(MtlATarget::new(&[], &pc).is_err());

    let data = toy_task(130, 3);
    let bad_noise = LatentNoiseField {
        r_values: vec![0.0; 5],
    };
    let h = HyperParams {
        alpha: 1.0,
        lengthscale: 1.0,
        noise_mean: -0.9,
        noise_alpha: 1.0,
        noise_lengthscale: 1.0,
    };
    let err = log_joint_stl(&data, &h, &bad_noise, &pc).unwrap_err();
    assert!(err.to_string().contains("0-1"), "error was: {err}");
}
