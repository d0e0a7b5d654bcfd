#![allow(dead_code)]

pub mod grad;

use diffzsl::diffusion::DiffusionSchedule;
use diffzsl::gan::{ModelDims, TrainConfig, TrainedModel};
use diffzsl::representations::Batch;
use diffzsl::{Matrix, Rng};

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn unit_direction(n: usize, rng: &mut Rng) -> Vec<f64> {
    let d: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    d.into_iter().map(|x| x / norm).collect()
}

fn shifted(theta: &[f64], d: &[f64], s: f64) -> Vec<f64> {
    theta.iter().zip(d).map(|(t, di)| t + s * di).collect()
}

/// Central difference of `f` along `d`, or `None` when a kink of a
/// piecewise-linear activation lies within the stencil: either halving the
/// step moves the estimate or the one-sided slopes disagree.
pub fn directional_fd(f: &dyn Fn(&[f64]) -> f64, theta: &[f64], d: &[f64]) -> Option<f64> {
    let at = |s: f64| f(&shifted(theta, d, s));
    let (f0, fp, fm) = (at(0.0), at(FD_STEP), at(-FD_STEP));
    let a = (fp - fm) / (2.0 * FD_STEP);
    let b = (at(FD_STEP / 2.0) - at(-FD_STEP / 2.0)) / FD_STEP;
    let fwd = (fp - f0) / FD_STEP;
    let bwd = (f0 - fm) / FD_STEP;
    if rel_err(a, b) > 1e-5 || rel_err(fwd, bwd) > 2e-3 {
        None
    } else {
        Some(a)
    }
}

/// Checks `grad` against central differences of `f` along `cases` random
/// directions; kink-crossing draws are redrawn. Returns the worst error.
pub fn check_gradient(
    f: &dyn Fn(&[f64]) -> f64,
    theta: &[f64],
    grad: &[f64],
    cases: usize,
    rng: &mut Rng,
) -> f64 {
    assert_eq!(theta.len(), grad.len());
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut tries = 0;
    while done < cases {
        tries += 1;
        assert!(tries < cases * 10, "too many kink crossings");
        let d = unit_direction(theta.len(), rng);
        let Some(fd) = directional_fd(f, theta, &d) else {
            continue;
        };
        let an: f64 = grad.iter().zip(&d).map(|(g, di)| g * di).sum();
        worst = worst.max(rel_err(fd, an));
        done += 1;
    }
    worst
}

pub fn small_dims() -> ModelDims {
    ModelDims {
        d_v: 5,
        d_r: 3,
        d_a: 4,
        z_dim: 2,
        steps: 4,
        one_hot_t: false,
    }
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        z_dim: 2,
        batch: 6,
        ..TrainConfig::default()
    }
}

pub fn small_model(seed: u64, config: TrainConfig, dims: ModelDims) -> TrainedModel {
    let sched = DiffusionSchedule::vp(dims.steps, 0.1, 20.0).unwrap();
    TrainedModel::init(dims, sched, config, &mut Rng::new(seed)).unwrap()
}

pub fn random_batch(n: usize, dims: &ModelDims, rng: &mut Rng) -> Batch {
    Batch {
        v0: rng.normal_matrix(n, dims.d_v),
        r0: rng.normal_matrix(n, dims.d_r),
        a: rng.normal_matrix(n, dims.d_a),
        labels: (0..n).map(|i| i % 3).collect(),
    }
}

pub fn flat(m: &Matrix) -> Vec<f64> {
    m.data().to_vec()
}

/// A small synthetic set with random unit-norm contrastive rows.
pub fn small_embedded(seed: u64) -> diffzsl::representations::EmbeddedSet {
    use diffzsl::datasets::{gen_synthetic, SyntheticSpec};
    let fs = gen_synthetic(&SyntheticSpec {
        n_seen_classes: 3,
        n_unseen_classes: 2,
        d_v: 5,
        d_a: 4,
        samples_per_class: 20,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let r = diffzsl::representations::l2_normalize_rows(
        &Rng::new(seed).substream("r").normal_matrix(fs.len(), 3),
    );
    diffzsl::representations::EmbeddedSet {
        visual: fs,
        contrastive: r,
    }
}
