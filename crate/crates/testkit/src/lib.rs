//! Numerical oracles used by the test suites. Nothing here depends on the
//! library under test.

/// Tanh-sinh quadrature of `f` over `[a, b]`.
///
/// `f(x, da, db)` receives the abscissa together with its distances to both
/// endpoints, computed without cancellation, so integrands with endpoint
/// singularities such as `(1 − x)^{-1/2}` or `ln(1 − x^a)` can be evaluated
/// accurately next to the boundary. Levels are refined until two successive
/// estimates agree to `rel_tol`.
pub fn tanh_sinh<F: Fn(f64, f64, f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let half = 0.5 * (b - a);
    let t_max = 6.5;
    let eval = |t: f64| -> f64 {
        let s = std::f64::consts::FRAC_PI_2 * t.sinh();
        let cosh_s = s.cosh();
        // 1 − tanh(s) and 1 + tanh(s) without cancellation
        let e = (-2.0 * s.abs()).exp();
        let small = 2.0 * e / (1.0 + e);
        let (one_minus, one_plus) = if s >= 0.0 {
            (small, 2.0 - small)
        } else {
            (2.0 - small, small)
        };
        let w = std::f64::consts::FRAC_PI_2 * t.cosh() / (cosh_s * cosh_s);
        let (da, db) = (half * one_plus, half * one_minus);
        if da <= 0.0 || db <= 0.0 || w == 0.0 {
            return 0.0;
        }
        let x = if da < db { a + da } else { b - db };
        let v = f(x, da, db);
        if v.is_finite() {
            w * v
        } else {
            0.0
        }
    };
    let mut h = 0.5;
    let mut sum = eval(0.0);
    let mut k = 1;
    while k as f64 * h <= t_max {
        let t = k as f64 * h;
        sum += eval(t) + eval(-t);
        k += 1;
    }
    let mut estimate = half * h * sum;
    for _ in 0..12 {
        h *= 0.5;
        let mut k = 1;
        while k as f64 * h <= t_max {
            let t = k as f64 * h;
            sum += eval(t) + eval(-t);
            k += 2;
        }
        let next = half * h * sum;
        if (next - estimate).abs() <= rel_tol * next.abs().max(1e-300) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Integral of `f` over the real line via the substitution
/// `x = t / (1 − t²)` on `(−1, 1)`.
pub fn integrate_real_line<F: Fn(f64) -> f64>(f: F, rel_tol: f64) -> f64 {
    tanh_sinh(
        |t, da, db| {
            // 1 − t² = (1 + t)(1 − t)
            let one_m = da * db;
            let x = t / one_m;
            let jac = (1.0 + t * t) / (one_m * one_m);
            f(x) * jac
        },
        -1.0,
        1.0,
        rel_tol,
    )
}

/// Composite Simpson rule on `[lo, hi]` with `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// Tensor-product Simpson rule over the square `[lo, hi]²`.
pub fn simpson_2d<F: Fn(f64, f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let w = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut s = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        for j in 0..=n {
            s += w(i) * w(j) * f(x, lo + j as f64 * h);
        }
    }
    s * h * h / 9.0
}

/// Mutual information (nats) of a joint probability table `p[i][j]`.
pub fn discrete_mutual_information(p: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = p.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..p[0].len())
        .map(|j| p.iter().map(|r| r[j]).sum())
        .collect();
    let mut mi = 0.0;
    for (i, r) in p.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if v > 0.0 {
                mi += v * (v / (rows[i] * cols[j])).ln();
            }
        }
    }
    mi
}

/// Entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sample mean and standard error.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `KL(Kumaraswamy(a, b) || Beta(α, 1))` by tanh-sinh quadrature of the
/// two densities.
pub fn kumaraswamy_beta1_kl(a: f64, b: f64, alpha: f64) -> f64 {
    tanh_sinh(
        |_, d0, d1| {
            // ν = d0 = 1 − d1, evaluated at whichever end is closer
            let ln_nu = if d0 < 0.5 { d0.ln() } else { (-d1).ln_1p() };
            let one_minus_nu_a = -(a * ln_nu).exp_m1();
            let ln_q = a.ln() + b.ln() + (a - 1.0) * ln_nu + (b - 1.0) * one_minus_nu_a.ln();
            let ln_p = alpha.ln() + (alpha - 1.0) * ln_nu;
            ln_q.exp() * (ln_q - ln_p)
        },
        0.0,
        1.0,
        1e-13,
    )
}

/// `Σ x·l − softplus(l)`.
pub fn bernoulli_loglik(x: &[f64], logits: &[f64]) -> f64 {
    x.iter()
        .zip(logits)
        .map(|(&x, &l)| x * l - softplus(l))
        .sum()
}

fn ln_normal(x: f64, m: f64, lv: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m).powi(2) / lv.exp())
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Terms of `−ELBO = distortion + MI + TC + dimension-wise KL`, averaged
/// over the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub distortion: f64,
    pub index_code_mi: f64,
    pub total_correlation: f64,
    pub dimwise_kl: f64,
    pub negative_elbo: f64,
}

/// Every term of a 2-D diagonal-Gaussian VAE with Bernoulli likelihood by
/// Simpson quadrature over ±9 standard deviations of each posterior, with
/// `q(z)` the exact mixture of the `N` posteriors.
///
/// `x` is `N × D`, `mu` and `log_var` are `N × 2`, and `decode_logits` maps
/// a batch of codes (`M × 2`, row-major) to `M × D` logits.
pub fn gaussian_2d_vae_terms<F>(
    x: &[f64],
    d: usize,
    mu: &[f64],
    log_var: &[f64],
    grid: usize,
    decode_logits: F,
) -> ElboTerms
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n_data = x.len() / d;
    let (mu, lv) = (mu, log_var);
    let sd = |n: usize, j: usize| (0.5 * lv[n * 2 + j]).exp();
    let half = 9.0;
    let std_density = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let ln_q_cond = |n: usize, z: [f64; 2]| {
        ln_normal(z[0], mu[2 * n], lv[2 * n]) + ln_normal(z[1], mu[2 * n + 1], lv[2 * n + 1])
    };
    let ln_q_dim = |j: usize, v: f64| {
        let t: Vec<f64> = (0..n_data)
            .map(|m| ln_normal(v, mu[2 * m + j], lv[2 * m + j]))
            .collect();
        log_mean_exp(&t)
    };
    let ln_q = |z: [f64; 2]| {
        let t: Vec<f64> = (0..n_data).map(|m| ln_q_cond(m, z)).collect();
        log_mean_exp(&t)
    };

    let (mut distortion, mut mi, mut tc, mut dimwise_kl, mut kl) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let step = 2.0 * half / grid as f64;
    for n in 0..n_data {
        let at = |u: f64, v: f64| [mu[2 * n] + sd(n, 0) * u, mu[2 * n + 1] + sd(n, 1) * v];
        // Decode every grid point once.
        let mut codes = Vec::with_capacity((grid + 1) * (grid + 1) * 2);
        for i in 0..=grid {
            for k in 0..=grid {
                codes.extend(at(-half + i as f64 * step, -half + k as f64 * step));
            }
        }
        let logits = decode_logits(&codes);
        let xn = &x[n * d..(n + 1) * d];
        let loglik = |u: f64, v: f64| {
            let i = ((u + half) / step).round() as usize;
            let k = ((v + half) / step).round() as usize;
            let r = i * (grid + 1) + k;
            bernoulli_loglik(xn, &logits[r * d..(r + 1) * d])
        };
        let weight = |u: f64, v: f64| std_density(u) * std_density(v);
        distortion -= simpson_2d(|u, v| weight(u, v) * loglik(u, v), -half, half, grid);
        mi += simpson_2d(
            |u, v| {
                let z = at(u, v);
                weight(u, v) * (ln_q_cond(n, z) - ln_q(z))
            },
            -half,
            half,
            grid,
        );
        tc += simpson_2d(
            |u, v| {
                let z = at(u, v);
                weight(u, v) * (ln_q(z) - ln_q_dim(0, z[0]) - ln_q_dim(1, z[1]))
            },
            -half,
            half,
            grid,
        );
        for j in 0..2 {
            dimwise_kl += simpson(
                |u| {
                    let v = mu[2 * n + j] + sd(n, j) * u;
                    std_density(u) * (ln_q_dim(j, v) - ln_normal(v, 0.0, 0.0))
                },
                -half,
                half,
                4 * grid,
            );
            kl += 0.5 * (mu[2 * n + j].powi(2) + lv[2 * n + j].exp() - 1.0 - lv[2 * n + j]);
        }
    }
    let n = n_data as f64;
    ElboTerms {
        distortion: distortion / n,
        index_code_mi: mi / n,
        total_correlation: tc / n,
        dimwise_kl: dimwise_kl / n,
        negative_elbo: (distortion + kl) / n,
    }
}
