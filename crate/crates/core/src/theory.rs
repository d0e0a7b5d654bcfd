//! Numerical checks of how forward diffusion shrinks the gap between two
//! distributions: overlap mass, KL divergence and the Wasserstein-1 distance.

use libm::erfc;
use serde::Serialize;
use serde_json::{json, Value};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matrix::{norm, Matrix};
use crate::mlp::Mlp;
use crate::rng::Rng;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn check_alpha_bar(ab: f64) -> Result<()> {
    if ab > 0.0 && ab < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "alpha_bar {ab} outside (0, 1)"
        )))
    }
}

/// Isotropic Gaussian `N(mean, var·I)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "variance {var} must be positive"
            )));
        }
        if mean.is_empty() {
            return Err(Error::Empty("gaussian mean"));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m).powi(2)).sum();
        -0.5 * (sq / self.var + d * (2.0 * std::f64::consts::PI * self.var).ln())
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let s = self.var.sqrt();
        self.mean.iter().map(|m| m + s * rng.normal()).collect()
    }

    /// Law of `√ᾱ x + √(1 − ᾱ) ε` for `x` drawn from `self`.
    pub fn diffused(&self, alpha_bar: f64) -> Gaussian {
        let s = alpha_bar.sqrt();
        Gaussian {
            mean: self.mean.iter().map(|m| s * m).collect(),
            var: alpha_bar * self.var + 1.0 - alpha_bar,
        }
    }
}

/// Overlap `∫min{p, q}` of `N(0, 1 − ᾱ)` and `N(√ᾱ m, 1 − ᾱ)`:
/// `2Φ(−|m|√ᾱ / (2√(1 − ᾱ)))`.
pub fn overlap_1d_closed(m: f64, alpha_bar: f64) -> Result<f64> {
    check_alpha_bar(alpha_bar)?;
    Ok(2.0 * phi(-m.abs() * alpha_bar.sqrt() / (2.0 * (1.0 - alpha_bar).sqrt())))
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// Mixture importance sampling of `∫min{p, q}`: draw `x ~ ½(p + q)` and
/// average `2 min(p, q) / (p + q)`.
pub fn overlap_mc(p: &Gaussian, q: &Gaussian, n: usize, rng: &mut Rng) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} dims",
            p.dim(),
            q.dim()
        )));
    }
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x = if rng.uniform() < 0.5 {
            p.sample(rng)
        } else {
            q.sample(rng)
        };
        // 2 min(p,q)/(p+q) = 2 / (1 + exp|log p − log q|)
        let w = 2.0 / (1.0 + (p.log_pdf(&x) - q.log_pdf(&x)).abs().exp());
        s += w;
        s2 += w * w;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0);
    Ok(Estimate {
        mean,
        se: (var / nf).sqrt(),
    })
}

/// Bhattacharyya-based lower bound `½ exp(−ᾱ‖Δ₀‖² / (4(1 − ᾱ)))`.
pub fn overlap_lower_bound(delta0: &[f64], alpha_bar: f64) -> Result<f64> {
    check_alpha_bar(alpha_bar)?;
    let d2: f64 = delta0.iter().map(|x| x * x).sum();
    Ok(0.5 * (-alpha_bar * d2 / (4.0 * (1.0 - alpha_bar))).exp())
}

/// `KL(p ‖ q)` between isotropic Gaussians.
pub fn gaussian_kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} dims",
            p.dim(),
            q.dim()
        )));
    }
    let d = p.dim() as f64;
    let sq: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let r = p.var / q.var;
    Ok(0.5 * (d * r + sq / q.var - d - d * r.ln()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlCheck {
    pub kl_0: f64,
    pub kl_t: f64,
    pub holds: bool,
}

pub fn kl_contraction_check(
    p0: &Gaussian,
    q0: &Gaussian,
    sched: &DiffusionSchedule,
    t: usize,
) -> Result<KlCheck> {
    if t > sched.steps() {
        return Err(Error::StepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    let ab = sched.alpha_bar(t);
    let kl_0 = gaussian_kl(p0, q0)?;
    let kl_t = gaussian_kl(&p0.diffused(ab), &q0.diffused(ab))?;
    Ok(KlCheck {
        kl_0,
        kl_t,
        holds: kl_t <= kl_0 + 1e-12,
    })
}

/// Uniformly weighted point cloud on the line, kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Empirical1D {
    points: Vec<f64>,
}

impl Empirical1D {
    pub fn new(mut points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("empirical distribution"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite support point".into()));
        }
        points.sort_by(f64::total_cmp);
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Exact `W₁` between two empirical laws.
///
/// Equal sizes reduce to the mean gap between order statistics. Unequal
/// sizes integrate `|F_p − F_q|` over the merged support.
pub fn w1_exact_1d(p: &Empirical1D, q: &Empirical1D) -> f64 {
    let (a, b) = (p.points(), q.points());
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct W1Check {
    pub w_0: f64,
    pub w_t_est: f64,
    pub bound: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Diffuses every support point of `p` and `q` with the same `n_noise`
/// standard-normal draws and compares the resulting `W₁` with `√ᾱ_t W₁(p, q)`.
pub fn w1_contraction_check(
    p: &Empirical1D,
    q: &Empirical1D,
    sched: &DiffusionSchedule,
    t: usize,
    n_noise: usize,
    rng: &mut Rng,
) -> Result<W1Check> {
    if t > sched.steps() {
        return Err(Error::StepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    if n_noise == 0 {
        return Err(Error::InvalidArgument("n_noise must be positive".into()));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let noise: Vec<f64> = (0..n_noise).map(|_| rng.normal()).collect();
    let spread = |e: &Empirical1D| {
        let pts = e
            .points()
            .iter()
            .flat_map(|x| noise.iter().map(move |z| s * x + n * z))
            .collect();
        Empirical1D::new(pts)
    };
    let w_0 = w1_exact_1d(p, q);
    let w_t_est = w1_exact_1d(&spread(p)?, &spread(q)?);
    let bound = s * w_0;
    let slack = 4.0 / (n_noise as f64).sqrt();
    Ok(W1Check {
        w_0,
        w_t_est,
        bound,
        slack,
        holds: w_t_est <= bound + slack,
    })
}

/// Which half of a train/validation pair a critic is scored on. Lets the
/// caller bind row-aligned conditioning inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapCheck {
    pub gap_adv: f64,
    pub gap_diff: f64,
    /// `√ᾱ_t`, the factor by which the W₁ bound on the gap shrinks.
    pub bound_ratio: f64,
}

/// Train/validation critic-score gaps on clean features (`d_adv`) and on
/// features diffused to step `t` (`d_diff`).
pub fn generalization_gap_check<A, D>(
    d_adv: A,
    d_diff: D,
    train: &Matrix,
    val: &Matrix,
    sched: &DiffusionSchedule,
    t: usize,
    rng: &mut Rng,
) -> Result<GapCheck>
where
    A: Fn(Side, &Matrix) -> Result<Matrix>,
    D: Fn(Side, &Matrix) -> Result<Matrix>,
{
    if train.rows() == 0 || val.rows() == 0 {
        return Err(Error::Empty("train or validation split"));
    }
    let mean = |m: Matrix| m.data().iter().sum::<f64>() / m.data().len().max(1) as f64;
    let gap_adv = (mean(d_adv(Side::Train, train)?) - mean(d_adv(Side::Val, val)?)).abs();
    let tr_t = sched.diffuse_marginal(train, t, rng)?;
    let va_t = sched.diffuse_marginal(val, t, rng)?;
    let gap_diff = (mean(d_diff(Side::Train, &tr_t)?) - mean(d_diff(Side::Val, &va_t)?)).abs();
    Ok(GapCheck {
        gap_adv,
        gap_diff,
        bound_ratio: sched.alpha_bar(t).sqrt(),
    })
}

/// Largest input-gradient norm of a scalar critic over `points`.
pub fn lipschitz_estimate(net: &Mlp, points: &Matrix) -> Result<f64> {
    let g = net.grad_input(points)?;
    Ok(g.iter_rows().map(norm).fold(0.0, f64::max))
}

/// Case counts and sample sizes for [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub overlap_cases: usize,
    pub bound_cases: usize,
    pub kl_pairs: usize,
    pub w1_pairs: usize,
    pub mc_samples: usize,
    pub n_noise: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            overlap_cases: 50,
            bound_cases: 50,
            kl_pairs: 1000,
            w1_pairs: 100,
            mc_samples: 100_000,
            n_noise: 256,
        }
    }
}

impl SuiteConfig {
    /// Same case count for every family.
    pub fn uniform(cases: usize) -> Self {
        Self {
            overlap_cases: cases,
            bound_cases: cases,
            kl_pairs: cases,
            w1_pairs: cases,
            ..Self::default()
        }
    }
}

/// One row of the `theory-check` report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub check: String,
    pub inputs: Value,
    pub values: Value,
    pub holds: bool,
}

fn uniform_in(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// Runs the four check families. Case `i` of each family draws from its own
/// forked stream, so the report does not depend on the execution mode.
pub fn run_suite(
    cfg: &SuiteConfig,
    sched: &DiffusionSchedule,
    rng: &Rng,
    exec: Exec,
) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();

    let base = rng.substream("overlap");
    let recs = exec.map(cfg.overlap_cases, |i| -> Result<CheckRecord> {
        let mut r = base.fork(i as u64);
        // past a 6σ mean gap the overlap is below 3e-3 and the mixture draws
        // rarely land where min(p, q) lives, so the SE stops being honest
        let (m, ab) = loop {
            let m = uniform_in(&mut r, -4.0, 4.0);
            let ab = uniform_in(&mut r, 0.02, 0.98);
            if m.abs() * ab.sqrt() / (1.0 - ab).sqrt() <= 6.0 {
                break (m, ab);
            }
        };
        let closed = overlap_1d_closed(m, ab)?;
        let sd = 1.0 - ab;
        let p = Gaussian::new(vec![0.0], sd)?;
        let q = Gaussian::new(vec![ab.sqrt() * m], sd)?;
        let est = overlap_mc(&p, &q, cfg.mc_samples, &mut r)?;
        Ok(CheckRecord {
            check: "overlap_1d".into(),
            inputs: json!({ "m": m, "alpha_bar": ab, "n": cfg.mc_samples }),
            values: json!({ "closed": closed, "mc": est.mean, "se": est.se }),
            holds: (closed - est.mean).abs() <= 3.0 * est.se + 1e-12,
        })
    });
    out.extend(recs.into_iter().collect::<Result<Vec<_>>>()?);

    let base = rng.substream("bound");
    let recs = exec.map(cfg.bound_cases, |i| -> Result<CheckRecord> {
        let mut r = base.fork(i as u64);
        let d = 1 + r.below(4);
        let scale = uniform_in(&mut r, 0.0, 3.0);
        let delta: Vec<f64> = (0..d).map(|_| scale * r.normal()).collect();
        let ab = uniform_in(&mut r, 0.02, 0.98);
        let bound = overlap_lower_bound(&delta, ab)?;
        let p = Gaussian::new(vec![0.0; d], 1.0 - ab)?;
        let q = Gaussian::new(delta.iter().map(|x| ab.sqrt() * x).collect(), 1.0 - ab)?;
        let est = overlap_mc(&p, &q, cfg.mc_samples, &mut r)?;
        Ok(CheckRecord {
            check: "overlap_lower_bound".into(),
            inputs: json!({ "delta0": delta, "alpha_bar": ab, "n": cfg.mc_samples }),
            values: json!({ "bound": bound, "mc": est.mean, "se": est.se }),
            holds: bound <= est.mean + 3.0 * est.se + 1e-12,
        })
    });
    out.extend(recs.into_iter().collect::<Result<Vec<_>>>()?);

    let base = rng.substream("kl");
    let recs = exec.map(cfg.kl_pairs, |i| -> Result<Vec<CheckRecord>> {
        let mut r = base.fork(i as u64);
        let d = 1 + r.below(8);
        let p0 = Gaussian::new(
            (0..d).map(|_| 2.0 * r.normal()).collect(),
            uniform_in(&mut r, 0.05, 4.0),
        )?;
        let q0 = Gaussian::new(
            (0..d).map(|_| 2.0 * r.normal()).collect(),
            uniform_in(&mut r, 0.05, 4.0),
        )?;
        (1..=sched.steps())
            .map(|t| {
                let c = kl_contraction_check(&p0, &q0, sched, t)?;
                Ok(CheckRecord {
                    check: "kl_contraction".into(),
                    inputs: json!({ "p0": p0, "q0": q0, "t": t }),
                    values: json!({ "kl_0": c.kl_0, "kl_t": c.kl_t }),
                    holds: c.holds,
                })
            })
            .collect()
    });
    for r in recs {
        out.extend(r?);
    }

    let base = rng.substream("w1");
    let recs = exec.map(cfg.w1_pairs, |i| -> Result<Vec<CheckRecord>> {
        let mut r = base.fork(i as u64);
        let (np, nq) = (1 + r.below(24), 1 + r.below(24));
        let shift = 3.0 * r.normal();
        let p = Empirical1D::new((0..np).map(|_| r.normal()).collect())?;
        let q = Empirical1D::new((0..nq).map(|_| shift + 1.5 * r.normal()).collect())?;
        (1..=sched.steps())
            .map(|t| {
                let c = w1_contraction_check(&p, &q, sched, t, cfg.n_noise, &mut r)?;
                Ok(CheckRecord {
                    check: "w1_contraction".into(),
                    inputs: json!({ "p": p.points(), "q": q.points(), "t": t, "n_noise": cfg.n_noise }),
                    values: json!({ "w_0": c.w_0, "w_t_est": c.w_t_est, "bound": c.bound, "slack": c.slack }),
                    holds: c.holds,
                })
            })
            .collect()
    });
    for r in recs {
        out.extend(r?);
    }
    Ok(out)
}
