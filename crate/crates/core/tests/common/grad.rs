//! Finite-difference checks of every analytic gradient. Each function runs
//! its case family and returns the worst relative error.

use super::*;
use diffzsl::gan::{critic_pass, generator_pass, r_pass, PassNoise, RepNoise, TrainedModel};
use diffzsl::genstage::reconstruction_pass;
use diffzsl::mlp::PenaltyGradMode;
use diffzsl::representations::{
    ce_loss, ce_loss_grad, l2_normalize_backward, l2_normalize_rows, sc_loss, sc_loss_grad,
};
use diffzsl::{Activation, Matrix, Mlp, Rng};

pub const CASES: usize = 20;

pub fn cross_entropy() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(11);
    for case in 0..CASES {
        let n = 2 + case % 5;
        let k = 2 + case % 4;
        let logits = rng.normal_matrix(n, k).scale(3.0);
        let y: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let (_, g) = ce_loss_grad(&logits, &y).unwrap();
        let f = |p: &[f64]| ce_loss(&Matrix::from_vec(n, k, p.to_vec()).unwrap(), &y).unwrap();
        worst = worst.max(check_gradient(&f, &flat(&logits), &flat(&g), 2, &mut rng));
    }
    worst
}

pub fn supervised_contrastive() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(12);
    for case in 0..CASES {
        let n = 4 + case % 5;
        let d = 3 + case % 3;
        let tau = [0.1, 0.5, 1.0][case % 3];
        let h = l2_normalize_rows(&rng.normal_matrix(n, d));
        let y: Vec<usize> = (0..n).map(|i| i % 2 + (case % 2) * (i % 3)).collect();
        let (_, g) = sc_loss_grad(&h, &y, tau).unwrap();
        let f = |p: &[f64]| sc_loss(&Matrix::from_vec(n, d, p.to_vec()).unwrap(), &y, tau).unwrap();
        worst = worst.max(check_gradient(&f, &flat(&h), &flat(&g), 2, &mut rng));
    }
    worst
}

pub fn row_normalization() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(13);
    for _ in 0..CASES {
        let z = rng.normal_matrix(3, 4);
        let w = rng.normal_matrix(3, 4);
        let g = l2_normalize_backward(&z, &w);
        let f = |p: &[f64]| {
            let y = l2_normalize_rows(&Matrix::from_vec(3, 4, p.to_vec()).unwrap());
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        worst = worst.max(check_gradient(&f, &flat(&z), &flat(&g), 2, &mut rng));
    }
    worst
}

fn random_net(case: usize, rng: &mut Rng) -> Mlp {
    let hidden = [Activation::LeakyRelu, Activation::Sigmoid, Activation::Relu][case % 3];
    let out = [Activation::Identity, Activation::Sigmoid][case % 2];
    let mut net = Mlp::new(&[4, 6, 5, 2], hidden, out, rng).unwrap();
    // zero biases behind a dead ReLU row put a pre-activation exactly on the kink
    let p: Vec<f64> = net
        .params()
        .iter()
        .map(|x| x + 0.1 * rng.normal())
        .collect();
    net.set_params(&p).unwrap();
    net
}

pub fn mlp_parameters_and_inputs() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(14);
    for case in 0..CASES {
        let net = random_net(case, &mut rng);
        let x = rng.normal_matrix(5, 4);
        let up = rng.normal_matrix(5, 2);
        let weighted = |net: &Mlp, x: &Matrix| -> f64 {
            net.forward(x)
                .unwrap()
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        let g = net.grad_params(&x, &up).unwrap().flatten();
        let f = |p: &[f64]| {
            let mut m = net.clone();
            m.set_params(p).unwrap();
            weighted(&m, &x)
        };
        worst = worst.max(check_gradient(&f, &net.params(), &g, 2, &mut rng));

        let gx = net.grad_input_upstream(&x, &up).unwrap();
        let f = |p: &[f64]| weighted(&net, &Matrix::from_vec(5, 4, p.to_vec()).unwrap());
        worst = worst.max(check_gradient(&f, &flat(&x), &flat(&gx), 2, &mut rng));
    }
    worst
}

pub fn gradient_penalty_second_order() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(15);
    for mode in [PenaltyGradMode::Exact, PenaltyGradMode::FiniteDifference] {
        for case in 0..CASES {
            let hidden = [Activation::LeakyRelu, Activation::Sigmoid][case % 2];
            let net = Mlp::new(&[5, 7, 6, 1], hidden, Activation::Identity, &mut rng).unwrap();
            let x = rng.normal_matrix(4, 5);
            let cols = if case % 3 == 0 { 0..5 } else { 0..3 };
            let (_, g) = net.grad_penalty_grad_cols(&x, cols.clone(), mode).unwrap();
            let f = |p: &[f64]| {
                let mut m = net.clone();
                m.set_params(p).unwrap();
                m.grad_penalty_grad_cols(&x, cols.clone(), mode).unwrap().0
            };
            worst = worst.max(check_gradient(&f, &net.params(), &g.flatten(), 2, &mut rng));
        }
    }
    worst
}

fn critic_net(model: &mut TrainedModel, k: usize) -> &mut Mlp {
    match k {
        0 => &mut model.critics.adv,
        1 => &mut model.critics.diff,
        _ => &mut model.critics.rep,
    }
}

pub fn critic_objective_per_critic() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(16);
    let dims = small_dims();
    for case in 0..CASES {
        let mut cfg = small_config();
        cfg.lambda_mu = [0.0, 1.0, 2.5][case % 3];
        cfg.gamma = [1.0, 2.0][case % 2];
        let mut d = dims;
        d.one_hot_t = case % 4 == 0;
        let model = small_model(case as u64, cfg, d);
        let batch = random_batch(5, &d, &mut rng);
        let noise = PassNoise::draw(5, &d, &mut rng);
        let eval = critic_pass(&model, &batch, &noise, true).unwrap();
        let grads = eval.grads.unwrap();
        for (k, gk) in grads.iter().enumerate() {
            let theta = critic_net(&mut model.clone(), k).params();
            let f = |p: &[f64]| {
                let mut m = model.clone();
                critic_net(&mut m, k).set_params(p).unwrap();
                -critic_pass(&m, &batch, &noise, false).unwrap().objective
            };
            worst = worst.max(check_gradient(&f, &theta, &gk.flatten(), 1, &mut rng));
        }
    }
    worst
}

pub fn generator_loss() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(17);
    for case in 0..CASES {
        let mut d = small_dims();
        d.one_hot_t = case % 2 == 1;
        let model = small_model(100 + case as u64, small_config(), d);
        let batch = random_batch(4, &d, &mut rng);
        let noise = PassNoise::draw_at(4, 1 + case % 4, &d, &mut rng);
        let (_, g) = generator_pass(&model, &batch, &noise, true).unwrap();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.gens.g.set_params(p).unwrap();
            generator_pass(&m, &batch, &noise, false).unwrap().0
        };
        worst = worst.max(check_gradient(
            &f,
            &model.gens.g.params(),
            &g.unwrap().flatten(),
            2,
            &mut rng,
        ));
    }
    worst
}

pub fn representation_denoiser() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(18);
    let d = small_dims();
    for case in 0..CASES {
        let model = small_model(200 + case as u64, small_config(), d);
        let batch = random_batch(4, &d, &mut rng);
        let noise = RepNoise::draw(4, &d, &mut rng);
        let (_, g) = r_pass(&model, &batch, &noise, true).unwrap();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.gens.r.set_params(p).unwrap();
            r_pass(&m, &batch, &noise, false).unwrap().0
        };
        worst = worst.max(check_gradient(
            &f,
            &model.gens.r.params(),
            &g.unwrap().flatten(),
            2,
            &mut rng,
        ));
    }
    worst
}

pub fn reconstruction() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(19);
    let d = small_dims();
    for case in 0..CASES {
        let model = small_model(300 + case as u64, small_config(), d);
        let b = random_batch(4, &d, &mut rng);
        let t = 1 + case % 4;
        let eps = rng.normal_matrix(4, d.d_v);
        let z = rng.normal_matrix(4, d.z_dim);
        let (_, g) = reconstruction_pass(&model, &b.v0, &b.r0, &b.a, t, &eps, &z, true).unwrap();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.gens.g.set_params(p).unwrap();
            reconstruction_pass(&m, &b.v0, &b.r0, &b.a, t, &eps, &z, false)
                .unwrap()
                .0
        };
        worst = worst.max(check_gradient(
            &f,
            &model.gens.g.params(),
            &g.unwrap().flatten(),
            2,
            &mut rng,
        ));
    }
    worst
}
