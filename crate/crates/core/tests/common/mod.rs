//! Independent oracles shared by the integration suites. Everything here
//! deliberately avoids the library's own evaluation paths: the CDF is
//! numerically integrated, quantiles come from bisection, binomial tails
//! are summed term by term, and gradients are finite differences.

#![allow(dead_code)]

use smoothcert_core::model::{ModelConfig, ModelParams};
use smoothcert_core::numerics::RngStream;

/// Adaptive Simpson integration to a relative tolerance.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol * (left + right).abs().max(1e-300) {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Lower-tail probability P(Z <= z) for z <= 0 with relative accuracy,
/// by numerical integration of the substituted density:
/// for a = -z >= 0, P(Z <= -a) = phi(a) * Int_0^inf exp(-a u - u^2/2) du.
fn lower_tail(z: f64, integrate: &impl Fn(&dyn Fn(f64) -> f64, f64, f64) -> f64) -> f64 {
    debug_assert!(z <= 0.0);
    let a = -z;
    let density_scale = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    // truncate where the exponent falls below -55 (integrand < 1.3e-24)
    let cutoff = -a + (a * a + 110.0).sqrt();
    let integrand = move |u: f64| (-a * u - 0.5 * u * u).exp();
    density_scale * integrate(&integrand, 0.0, cutoff)
}

/// Oracle standard-normal CDF by adaptive numerical integration of the
/// Gaussian density.
pub fn oracle_phi(z: f64) -> f64 {
    if z > 0.0 {
        return 1.0 - oracle_phi(-z);
    }
    lower_tail(z, &|f, a, b| adaptive_simpson(&f, a, b, 1e-13))
}

/// Fixed-order Gauss-Legendre nodes and weights on [-1, 1], computed by
/// Newton iteration on the Legendre recurrence.
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Chebyshev initial guess for the i-th root
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // Legendre P_n(x) and derivative via the recurrence
                let (mut p0, mut p1) = (1.0f64, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn integrate(&self, f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        half * acc
    }

    /// Composite rule over `panels` equal panels.
    pub fn integrate_composite(&self, f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let step = (b - a) / panels as f64;
        (0..panels)
            .map(|i| self.integrate(f, a + i as f64 * step, a + (i + 1) as f64 * step))
            .sum()
    }
}

/// Lower-tail CDF through the fixed Gauss-Legendre rule; z <= 0.
pub fn oracle_phi_fast(z: f64, gl: &GaussLegendre) -> f64 {
    lower_tail(z, &|f, a, b| gl.integrate_composite(f, a, b, 6))
}

/// Oracle quantile: bisection on the integrated CDF, done in lower-tail
/// space so the comparison keeps relative accuracy on both sides of 1/2
/// (the quadrature is a fast fixed Gauss-Legendre rule, cross-checked
/// against the adaptive integrator in the suite).
pub fn oracle_quantile_with(p: f64, gl: &GaussLegendre) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    if p == 0.5 {
        return 0.0;
    }
    if p > 0.5 {
        return -oracle_quantile_with(1.0 - p, gl);
    }
    let tail = |z: f64| lower_tail(z, &|f, a, b| gl.integrate_composite(f, a, b, 6));
    let (mut lo, mut hi) = (-10.0_f64, 0.0_f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Oracle binomial tail P[Bin(n, p) >= k] by direct term summation using
/// a log-factorial table (exact recurrence, no special functions).
pub struct BinomialTailOracle {
    ln_fact: Vec<f64>,
}

impl BinomialTailOracle {
    pub fn new(max_n: usize) -> Self {
        let mut ln_fact = vec![0.0f64; max_n + 1];
        for i in 1..=max_n {
            ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
        }
        BinomialTailOracle { ln_fact }
    }

    fn ln_pmf(&self, k: u64, n: u64, p: f64) -> f64 {
        let (k, n) = (k as usize, n as usize);
        self.ln_fact[n] - self.ln_fact[k] - self.ln_fact[n - k]
            + k as f64 * p.ln()
            + (n - k) as f64 * (1.0 - p).ln()
    }

    pub fn tail_geq(&self, k: u64, n: u64, p: f64) -> f64 {
        if k == 0 {
            return 1.0;
        }
        if p <= 0.0 {
            return 0.0;
        }
        if p >= 1.0 {
            return 1.0;
        }
        if (k as f64) > n as f64 * p {
            // above the mean: sum upward from k, terms decay
            let mut term = self.ln_pmf(k, n, p).exp();
            let mut sum = 0.0;
            for i in k..=n {
                sum += term;
                if term < 1e-18 * sum {
                    break;
                }
                if i < n {
                    term *= p * (n - i) as f64 / ((1.0 - p) * (i + 1) as f64);
                }
            }
            sum.min(1.0)
        } else {
            // below the mean: complement of P[X <= k-1], summed downward
            // from k-1 where the terms decay
            let mut term = self.ln_pmf(k - 1, n, p).exp();
            let mut sum = 0.0;
            let mut i = k - 1;
            loop {
                sum += term;
                if term < 1e-18 * sum || i == 0 {
                    break;
                }
                term *= (1.0 - p) * i as f64 / (p * (n - i + 1) as f64);
                i -= 1;
            }
            (1.0 - sum).max(0.0)
        }
    }

    /// Oracle Clopper-Pearson lower bound: bisect p until
    /// P[Bin(n,p) >= k] crosses alpha.
    pub fn cp_lower(&self, k: u64, n: u64, alpha: f64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..48 {
            let mid = 0.5 * (lo + hi);
            if self.tail_geq(k, n, mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// The small model every gradient check uses: 4x4 single-channel images,
/// 2x2 patches, one block per stack; under 5k parameters.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        patch_size: 2,
        image_channels: 1,
        image_height: 4,
        image_width: 4,
        enc_dim: 8,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 8,
        dec_depth: 1,
        dec_heads: 2,
        num_classes: 3,
        use_class_token: true,
    }
}

pub struct FdReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel_err: f64,
}

/// Central finite differences (step 1e-5) against analytic gradients over
/// every trainable coordinate with |grad| > 1e-8. `eval` must be a pure
/// function of the parameters.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    grads: &smoothcert_core::model::Grads<f64>,
    eval: impl Fn(&ModelParams<f64>) -> f64,
) -> FdReport {
    let h = 1e-5;
    let mut report = FdReport { checked: 0, passed: 0, worst_rel_err: 0.0 };
    let names: Vec<String> = params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| ModelParams::<f64>::is_trainable(n))
        .collect();
    for name in names {
        let g = grads.get(&name).expect("missing gradient tensor");
        let (rows, cols) = g.dim();
        for r in 0..rows {
            for c in 0..cols {
                let analytic = g[(r, c)];
                if analytic.abs() <= 1e-8 {
                    continue;
                }
                let mut perturbed = params.clone();
                set_coord(&mut perturbed, &name, r, c, h);
                let plus = eval(&perturbed);
                let mut perturbed = params.clone();
                set_coord(&mut perturbed, &name, r, c, -h);
                let minus = eval(&perturbed);
                let fd = (plus - minus) / (2.0 * h);
                let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-12);
                report.checked += 1;
                if rel <= 1e-4 {
                    report.passed += 1;
                } else if rel > report.worst_rel_err {
                    report.worst_rel_err = rel;
                }
            }
        }
    }
    report
}

fn set_coord(params: &mut ModelParams<f64>, name: &str, r: usize, c: usize, delta: f64) {
    for (n, t) in params.named_tensors_mut() {
        if n == name {
            t[(r, c)] += delta;
            return;
        }
    }
    panic!("tensor {name} not found");
}

/// Deterministic random image with pixels in [0, 1].
pub fn random_image(
    rng: &mut RngStream,
    channels: usize,
    height: usize,
    width: usize,
) -> smoothcert_core::corruption::ImageTensor {
    let n = channels * height * width;
    smoothcert_core::corruption::ImageTensor::new(
        channels,
        height,
        width,
        (0..n).map(|_| rng.next_uniform()).collect(),
    )
    .unwrap()
}
