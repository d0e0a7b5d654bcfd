//! Theory checks against independent oracles, plus property tests.

use std::collections::BTreeMap;

use diffzsl::datasets::kept_count;
use diffzsl::diffusion::{DiffusionSchedule, ScheduleConfig};
use diffzsl::exec::Exec;
use diffzsl::gan::mutual_loss;
use diffzsl::genstage::harmonic_mean;
use diffzsl::representations::{l2_normalize_rows, sc_loss};
use diffzsl::theory::*;
use diffzsl::{Activation, Matrix, Mlp, Rng};
use proptest::prelude::*;

fn sched() -> DiffusionSchedule {
    ScheduleConfig::default().build().unwrap()
}

/// Min-cost perfect assignment on a square cost matrix (shortest augmenting
/// paths with potentials).
fn assignment_cost(c: &[Vec<f64>]) -> f64 {
    let n = c.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| c[p[j] - 1][j - 1]).sum()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// W₁ as an optimal matching after replicating both samples to a common size.
fn w1_by_matching(a: &[f64], b: &[f64]) -> f64 {
    let l = a.len() / gcd(a.len(), b.len()) * b.len();
    let rep = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .flat_map(|&v| std::iter::repeat_n(v, l / x.len()))
            .collect()
    };
    let (ra, rb) = (rep(a), rep(b));
    let cost: Vec<Vec<f64>> = ra
        .iter()
        .map(|x| rb.iter().map(|y| (x - y).abs()).collect())
        .collect();
    assignment_cost(&cost) / l as f64
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn w1_matches_brute_force_permutations() {
    let mut rng = Rng::new(40);
    for n in 1..=6 {
        let perms = permutations(n);
        for _ in 0..10 {
            let a: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..n).map(|_| 2.0 * rng.normal() + 0.5).collect();
            let brute = perms
                .iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .map(|(i, &j)| (a[i] - b[j]).abs())
                        .sum::<f64>()
                        / n as f64
                })
                .fold(f64::INFINITY, f64::min);
            let got = w1_exact_1d(
                &Empirical1D::new(a.clone()).unwrap(),
                &Empirical1D::new(b.clone()).unwrap(),
            );
            assert!((got - brute).abs() < 1e-12, "{got} vs {brute}");
        }
    }
}

#[test]
fn w1_unequal_sizes_matches_matching_oracle() {
    let mut rng = Rng::new(41);
    for na in 1..=8 {
        for nb in 1..=8 {
            let a: Vec<f64> = (0..na).map(|_| rng.normal()).collect();
            let mut b: Vec<f64> = (0..nb).map(|_| rng.normal() + 1.0).collect();
            if nb > 2 {
                // ties across samples
                b[0] = a[0];
            }
            let oracle = w1_by_matching(&a, &b);
            let got = w1_exact_1d(&Empirical1D::new(a).unwrap(), &Empirical1D::new(b).unwrap());
            assert!((got - oracle).abs() < 1e-12, "{na}x{nb}: {got} vs {oracle}");
        }
    }
}

#[test]
fn w1_with_shared_noise_contracts_exactly() {
    let s = sched();
    let mut rng = Rng::new(42);
    for _ in 0..50 {
        let p = Empirical1D::new((0..1 + rng.below(10)).map(|_| rng.normal()).collect()).unwrap();
        let q = Empirical1D::new(
            (0..1 + rng.below(10))
                .map(|_| 3.0 * rng.normal() - 1.0)
                .collect(),
        )
        .unwrap();
        for t in 0..=s.steps() {
            let c = w1_contraction_check(&p, &q, &s, t, 64, &mut rng).unwrap();
            assert!(
                c.w_t_est <= c.bound * (1.0 + 1e-12) + 1e-12,
                "t={t}: {} > {}",
                c.w_t_est,
                c.bound
            );
            assert!(c.holds);
        }
    }
}

#[test]
fn default_suite_holds_everywhere() {
    let s = sched();
    let recs = run_suite(
        &SuiteConfig::default(),
        &s,
        &Rng::new(0).substream("theory"),
        Exec::default(),
    )
    .unwrap();
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &recs {
        let e = counts.entry(r.check.as_str()).or_default();
        e.0 += usize::from(r.holds);
        e.1 += 1;
    }
    assert_eq!(counts["overlap_1d"].1, 50);
    assert_eq!(counts["overlap_lower_bound"].1, 50);
    assert_eq!(counts["kl_contraction"].1, 1000 * s.steps());
    assert_eq!(counts["w1_contraction"].1, 100 * s.steps());
    for r in recs.iter().filter(|r| !r.holds) {
        eprintln!("{} {} {}", r.check, r.inputs, r.values);
    }
    for (k, (ok, n)) in counts {
        assert_eq!(ok, n, "{k}");
    }
}

#[test]
fn suite_is_identical_across_execution_modes() {
    let s = sched();
    let cfg = SuiteConfig {
        mc_samples: 2000,
        ..SuiteConfig::uniform(8)
    };
    let rng = Rng::new(9);
    let a = run_suite(&cfg, &s, &rng, Exec::Sequential).unwrap();
    let b = run_suite(&cfg, &s, &rng, Exec::default()).unwrap();
    assert_eq!(a, b);
}

/// One-hidden-layer piecewise-linear critic on the line. Its slopes are
/// constant between the hidden units' kinks `−b/w`.
fn line_critic(rng: &mut Rng) -> (Mlp, f64) {
    let mut net = Mlp::new(
        &[1, 12, 1],
        Activation::LeakyRelu,
        Activation::Identity,
        rng,
    )
    .unwrap();
    let p: Vec<f64> = net
        .params()
        .iter()
        .map(|x| x + 0.5 * rng.normal())
        .collect();
    net.set_params(&p).unwrap();
    let l0 = &net.layers[0];
    let mut kinks: Vec<f64> = (0..12)
        .filter(|&j| l0.weight[(0, j)] != 0.0)
        .map(|j| -l0.bias[j] / l0.weight[(0, j)])
        .collect();
    kinks.sort_by(f64::total_cmp);
    let mut probes = vec![kinks[0] - 1.0, kinks[kinks.len() - 1] + 1.0];
    probes.extend(kinks.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let pts = Matrix::from_vec(probes.len(), 1, probes).unwrap();
    let lip = lipschitz_estimate(&net, &pts).unwrap();
    (net, lip)
}

#[test]
fn critic_gap_bounded_by_lipschitz_times_w1() {
    let s = sched();
    let mut rng = Rng::new(43);
    for case in 0..40 {
        let (net, lip) = line_critic(&mut rng);
        let ntr = 5 + case % 7;
        let nva = 3 + case % 5;
        let train: Vec<f64> = (0..ntr).map(|_| rng.normal()).collect();
        let val: Vec<f64> = (0..nva).map(|_| rng.normal() + 0.3).collect();
        let tr = Matrix::from_vec(ntr, 1, train.clone()).unwrap();
        let va = Matrix::from_vec(nva, 1, val.clone()).unwrap();
        let critic = |_: Side, x: &Matrix| net.forward(x);
        let g =
            generalization_gap_check(critic, critic, &tr, &va, &s, 1 + case % 4, &mut rng).unwrap();
        let w = w1_exact_1d(
            &Empirical1D::new(train).unwrap(),
            &Empirical1D::new(val).unwrap(),
        );
        assert!(
            g.gap_adv <= lip * w + 1e-12,
            "{} > {} * {}",
            g.gap_adv,
            lip,
            w
        );
        assert!(g.bound_ratio > 0.0 && g.bound_ratio < 1.0);
    }
}

#[test]
fn kl_contraction_on_gaussian_pairs() {
    let s = sched();
    let mut rng = Rng::new(44);
    for _ in 0..1000 {
        let d = 1 + rng.below(5);
        let p = Gaussian::new(
            (0..d).map(|_| 2.0 * rng.normal()).collect(),
            0.05 + 3.0 * rng.uniform(),
        )
        .unwrap();
        let q = Gaussian::new(
            (0..d).map(|_| 2.0 * rng.normal()).collect(),
            0.05 + 3.0 * rng.uniform(),
        )
        .unwrap();
        let mut prev = gaussian_kl(&p, &q).unwrap();
        for t in 1..=s.steps() {
            let c = kl_contraction_check(&p, &q, &s, t).unwrap();
            assert!(c.holds && c.kl_t <= prev + 1e-12);
            prev = c.kl_t;
        }
    }
}

#[test]
fn overlap_reference_values() {
    let closed = overlap_1d_closed(2.0, 0.5).unwrap();
    let p = Gaussian::new(vec![0.0], 0.5).unwrap();
    let q = Gaussian::new(vec![0.5f64.sqrt() * 2.0], 0.5).unwrap();
    let est = overlap_mc(&p, &q, 1_000_000, &mut Rng::new(46)).unwrap();
    assert!((est.mean - closed).abs() < 2e-3);
    assert!((closed - 0.31731).abs() < 1e-5);
    let same = overlap_mc(&p, &p, 100, &mut Rng::new(1)).unwrap();
    assert_eq!(same.mean, 1.0);
    let far = Gaussian::new(vec![20.0 * 0.5f64.sqrt()], 0.5).unwrap();
    assert!(
        overlap_mc(&p, &far, 100_000, &mut Rng::new(2))
            .unwrap()
            .mean
            < 1e-4
    );
}

/// 2-D Gaussian overlap by quadrature on a fine grid.
#[test]
fn overlap_mc_agrees_with_quadrature() {
    let mut rng = Rng::new(45);
    let p = Gaussian::new(vec![0.0, 0.0], 0.6).unwrap();
    let q = Gaussian::new(vec![1.0, -0.5], 0.6).unwrap();
    let (h, lim) = (0.02, 7.0);
    let steps = (2.0 * lim / h) as i64;
    let mut quad = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let x = [-lim + (i as f64 + 0.5) * h, -lim + (j as f64 + 0.5) * h];
            quad += p.log_pdf(&x).min(q.log_pdf(&x)).exp() * h * h;
        }
    }
    let est = overlap_mc(&p, &q, 100_000, &mut rng).unwrap();
    assert!(
        (est.mean - quad).abs() < 3.0 * est.se,
        "{} vs {quad}",
        est.mean
    );
}

fn rotation(d: usize, rng: &mut Rng) -> Matrix {
    // Gram-Schmidt on a Gaussian matrix
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let c: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&q).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn harmonic_mean_formula(u in 0.0f64..100.0, s in 0.0f64..100.0) {
        let h = harmonic_mean(u, s);
        if u + s > 0.0 {
            prop_assert!((h - 2.0 * u * s / (u + s)).abs() < 1e-12);
        }
        prop_assert!(h <= 2.0 * u.min(s) + 1e-12);
        prop_assert!(h <= u.max(s) + 1e-12);
        prop_assert!(h >= u.min(s) - 1e-12);
    }

    #[test]
    fn mutual_loss_nonnegative_and_zero_iff_equal(
        a in -5.0f64..5.0, d in -5.0f64..5.0, r in -5.0f64..5.0,
        kappa in 0.01f64..1.0, gamma in 0.0f64..4.0,
    ) {
        let l = mutual_loss(a, d, r, kappa, gamma);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(mutual_loss(a, a, a, kappa, gamma), 0.0);
        if l == 0.0 {
            prop_assert!(a == d && d == r);
        }
    }

    #[test]
    fn sc_loss_rotation_invariant(seed in 0u64..1000, n in 4usize..10, d in 2usize..6) {
        let mut rng = Rng::new(seed);
        let h = l2_normalize_rows(&rng.normal_matrix(n, d));
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rot = h.matmul(&rotation(d, &mut rng)).unwrap();
        let (a, b) = (sc_loss(&h, &y, 0.2).unwrap(), sc_loss(&rot, &y, 0.2).unwrap());
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn overlap_monotone(m1 in 0.0f64..5.0, dm in 0.0f64..2.0, ab in 0.02f64..0.97, dab in 0.0f64..0.02) {
        let a = overlap_1d_closed(m1, ab).unwrap();
        prop_assert!(overlap_1d_closed(m1 + dm, ab).unwrap() <= a + 1e-15);
        prop_assert!(overlap_1d_closed(-m1, ab).unwrap() == a);
        // more noise, more overlap
        prop_assert!(overlap_1d_closed(m1, ab - dab).unwrap() >= a - 1e-15);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn lower_bound_below_closed_overlap(m in -4.0f64..4.0, ab in 0.02f64..0.98) {
        prop_assert!(overlap_lower_bound(&[m], ab).unwrap() <= overlap_1d_closed(m, ab).unwrap() + 1e-15);
    }

    #[test]
    fn kept_count_is_ceiling(n in 1usize..2000, pct in 1u32..=100) {
        let ratio = pct as f64 / 100.0;
        let want = (pct as usize * n).div_ceil(100);
        prop_assert_eq!(kept_count(ratio, n), want);
    }
}
