//! Training stage: the feature generator `G`, the representation generator
//! `R`, three Wasserstein critics and the alternating min–max loop.
//!
//! Network inputs (rows are concatenations, `e(t)` is the time embedding):
//!
//! | net    | input                                  | output |
//! |--------|----------------------------------------|--------|
//! | `G`    | `a ‖ r₀ ‖ e(t) ‖ v_t ‖ z`              | `ṽ₀`   |
//! | `R`    | `a ‖ e(t) ‖ r_t ‖ z`                   | `r̃₀`   |
//! | `D_adv`| `v ‖ a`                                | score  |
//! | `D_diff`| `v_{t−1} ‖ v_t ‖ r₀ ‖ a ‖ e(t)`       | score  |
//! | `D_rep`| `v ‖ r₀`                               | score  |
//!
//! Gradient penalties only cover the leading `v` block of each critic input.

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{Activation, Gradients, Mlp, PenaltyGradMode, NORM_EPS};
use crate::optim::{Adam, AdamConfig};
use crate::representations::{Batch, EmbeddedSet};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_gp_adv: f64,
    pub lambda_gp_diff: f64,
    pub lambda_gp_rep: f64,
    pub lambda_mu: f64,
    pub gamma: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub batch: usize,
    /// One epoch lets the critics see every training row once.
    pub epochs: usize,
    pub hidden: usize,
    pub z_dim: usize,
    /// Append a one-hot of `t` to the scalar `κ_t`.
    pub one_hot_t: bool,
    pub adam: AdamConfig,
    pub r_lr: f64,
    pub penalty_mode: PenaltyGradMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_gp_adv: 10.0,
            lambda_gp_diff: 10.0,
            lambda_gp_rep: 10.0,
            lambda_mu: 1.0,
            gamma: 2.0,
            critic_steps: 5,
            batch: 64,
            epochs: 40,
            hidden: 256,
            z_dim: 16,
            one_hot_t: false,
            adam: AdamConfig::default(),
            r_lr: 1e-3,
            penalty_mode: PenaltyGradMode::Exact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lambda_gp_adv > 0.0 && self.lambda_gp_diff > 0.0 && self.lambda_gp_rep > 0.0) {
            return bad("gradient-penalty weights must be positive");
        }
        if !(self.gamma >= 0.0) || !(self.lambda_mu >= 0.0) {
            return bad("gamma and lambda_mu must be non-negative");
        }
        if self.critic_steps == 0 || self.batch == 0 || self.hidden == 0 {
            return bad("critic_steps, batch and hidden must be positive");
        }
        if !(self.adam.lr > 0.0 && self.r_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Mutual-learning loss `κ^γ (|W_diff − W_adv| + |W_diff − W_rep|) + |W_adv − W_rep|`.
pub fn mutual_loss(w_adv: f64, w_diff: f64, w_rep: f64, kappa: f64, gamma: f64) -> f64 {
    kappa.powf(gamma) * ((w_diff - w_adv).abs() + (w_diff - w_rep).abs()) + (w_adv - w_rep).abs()
}

/// [`mutual_loss`] with `κ_t` taken from the schedule.
pub fn mutual_loss_at(w: [f64; 3], t: usize, sched: &DiffusionSchedule, gamma: f64) -> Result<f64> {
    if t == 0 || t > sched.steps() {
        return Err(Error::StepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    Ok(mutual_loss(w[0], w[1], w[2], sched.n2d(t), gamma))
}

/// Subgradient of [`mutual_loss`] with respect to `(W_adv, W_diff, W_rep)`,
/// using `sign(0) = 0`.
pub fn mutual_loss_grad(w_adv: f64, w_diff: f64, w_rep: f64, kappa: f64, gamma: f64) -> [f64; 3] {
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let k = kappa.powf(gamma);
    let s1 = sign(w_diff - w_adv);
    let s2 = sign(w_diff - w_rep);
    let s3 = sign(w_adv - w_rep);
    [-k * s1 + s3, k * (s1 + s2), -k * s2 - s3]
}

/// Widths shared by every network of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_r: usize,
    pub d_a: usize,
    pub z_dim: usize,
    pub steps: usize,
    pub one_hot_t: bool,
}

impl ModelDims {
    pub fn t_width(&self) -> usize {
        1 + if self.one_hot_t { self.steps } else { 0 }
    }

    pub fn g_in(&self) -> usize {
        self.d_a + self.d_r + self.t_width() + self.d_v + self.z_dim
    }

    pub fn r_in(&self) -> usize {
        self.d_a + self.t_width() + self.d_r + self.z_dim
    }

    pub fn adv_in(&self) -> usize {
        self.d_v + self.d_a
    }

    pub fn diff_in(&self) -> usize {
        2 * self.d_v + self.d_r + self.d_a + self.t_width()
    }

    pub fn rep_in(&self) -> usize {
        self.d_v + self.d_r
    }

    /// `e(t)` repeated on `n` rows.
    pub fn t_embed(&self, sched: &DiffusionSchedule, t: usize, n: usize) -> Matrix {
        let mut row = vec![0.0; self.t_width()];
        row[0] = if t == 0 { 0.0 } else { sched.n2d(t) };
        if self.one_hot_t && t >= 1 {
            row[t] = 1.0;
        }
        let mut m = Matrix::zeros(n, row.len());
        for i in 0..n {
            m.row_mut(i).copy_from_slice(&row);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generators {
    pub g: Mlp,
    pub r: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub adv: Mlp,
    pub diff: Mlp,
    pub rep: Mlp,
}

/// Generators, critics and the schedule they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub dims: ModelDims,
    pub schedule: DiffusionSchedule,
    pub config: TrainConfig,
    pub gens: Generators,
    pub critics: Critics,
}

impl TrainedModel {
    /// Freshly initialised networks.
    pub fn init(
        dims: ModelDims,
        schedule: DiffusionSchedule,
        config: TrainConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.steps != schedule.steps() {
            return Err(Error::DimensionMismatch(format!(
                "model built for T = {}, schedule has {}",
                dims.steps,
                schedule.steps()
            )));
        }
        let h = config.hidden;
        let (lr, id) = (Activation::LeakyRelu, Activation::Identity);
        let gens = Generators {
            g: Mlp::new(&[dims.g_in(), h, h, dims.d_v], lr, id, rng)?,
            r: Mlp::new(&[dims.r_in(), h, dims.d_r], lr, id, rng)?,
        };
        let critics = Critics {
            adv: Mlp::new(&[dims.adv_in(), h, 1], lr, id, rng)?,
            diff: Mlp::new(&[dims.diff_in(), h, 1], lr, id, rng)?,
            rep: Mlp::new(&[dims.rep_in(), h, 1], lr, id, rng)?,
        };
        Ok(Self {
            dims,
            schedule,
            config,
            gens,
            critics,
        })
    }

    pub fn g_input(
        &self,
        a: &Matrix,
        r0: &Matrix,
        t: usize,
        v_t: &Matrix,
        z: &Matrix,
    ) -> Result<Matrix> {
        let e = self.dims.t_embed(&self.schedule, t, a.rows());
        Matrix::hcat(&[a, r0, &e, v_t, z])
    }

    pub fn r_input(&self, a: &Matrix, t: usize, r_t: &Matrix, z: &Matrix) -> Result<Matrix> {
        let e = self.dims.t_embed(&self.schedule, t, a.rows());
        Matrix::hcat(&[a, &e, r_t, z])
    }

    /// `ṽ₀ = G(a, r₀, t, v_t, z)`.
    pub fn generate(
        &self,
        a: &Matrix,
        r0: &Matrix,
        t: usize,
        v_t: &Matrix,
        z: &Matrix,
    ) -> Result<Matrix> {
        self.gens.g.forward(&self.g_input(a, r0, t, v_t, z)?)
    }

    /// `r̃₀ = R(a, t, r_t, z)`.
    pub fn represent(&self, a: &Matrix, t: usize, r_t: &Matrix, z: &Matrix) -> Result<Matrix> {
        self.gens.r.forward(&self.r_input(a, t, r_t, z)?)
    }

    pub fn adv_input(v: &Matrix, a: &Matrix) -> Result<Matrix> {
        Matrix::hcat(&[v, a])
    }

    pub fn diff_input(
        &self,
        v_prev: &Matrix,
        v_t: &Matrix,
        r0: &Matrix,
        a: &Matrix,
        t: usize,
    ) -> Result<Matrix> {
        let e = self.dims.t_embed(&self.schedule, t, a.rows());
        Matrix::hcat(&[v_prev, v_t, r0, a, &e])
    }

    pub fn rep_input(v: &Matrix, r0: &Matrix) -> Result<Matrix> {
        Matrix::hcat(&[v, r0])
    }
}

/// All randomness consumed by one critic or generator pass.
#[derive(Debug, Clone)]
pub struct PassNoise {
    pub t: usize,
    pub z: Matrix,
    /// Noise of the marginal `v₀ → v_{t−1}`.
    pub eps_prev: Matrix,
    /// Noise of the step `v_{t−1} → v_t`.
    pub eps_step: Matrix,
    /// Noise of the posterior re-noising `ṽ₀ → ṽ_{t−1}`.
    pub eps_post: Matrix,
    /// Interpolation weights of the three penalties.
    pub alpha: [Vec<f64>; 3],
}

impl PassNoise {
    /// Uniform `t ∈ 1..=T`, one per minibatch.
    pub fn draw(n: usize, dims: &ModelDims, rng: &mut Rng) -> Self {
        let t = 1 + rng.below(dims.steps);
        Self::draw_at(n, t, dims, rng)
    }

    pub fn draw_at(n: usize, t: usize, dims: &ModelDims, rng: &mut Rng) -> Self {
        let z = rng.normal_matrix(n, dims.z_dim);
        let eps_prev = rng.normal_matrix(n, dims.d_v);
        let eps_step = rng.normal_matrix(n, dims.d_v);
        let eps_post = rng.normal_matrix(n, dims.d_v);
        let mut u = || (0..n).map(|_| rng.uniform()).collect::<Vec<_>>();
        let alpha = [u(), u(), u()];
        Self {
            t,
            z,
            eps_prev,
            eps_step,
            eps_post,
            alpha,
        }
    }
}

/// Real and fake tensors of one pass.
#[derive(Debug, Clone)]
pub struct Materials {
    pub v_prev: Matrix,
    pub v_t: Matrix,
    pub g_in: Matrix,
    pub fake_v0: Matrix,
    pub fake_prev: Matrix,
}

/// Real `v_{t−1}` from the marginal, `v_t` by one forward step, fake `ṽ₀`
/// from `G` and fake `ṽ_{t−1}` by posterior sampling.
pub fn materials(model: &TrainedModel, batch: &Batch, noise: &PassNoise) -> Result<Materials> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let s = &model.schedule;
    let t = noise.t;
    if t == 0 || t > s.steps() {
        return Err(Error::StepOutOfRange { t, max: s.steps() });
    }
    let v_prev = s.diffuse_marginal_with(&batch.v0, t - 1, &noise.eps_prev)?;
    let (sa, sb) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
    let v_t = v_prev.zip_map(&noise.eps_step, |x, e| sa * x + sb * e)?;
    let g_in = model.g_input(&batch.a, &batch.r0, t, &v_t, &noise.z)?;
    let fake_v0 = model.gens.g.forward(&g_in)?;
    let fake_prev = s.posterior_sample_with(&fake_v0, &v_t, t, &noise.eps_post)?;
    Ok(Materials {
        v_prev,
        v_t,
        g_in,
        fake_v0,
        fake_prev,
    })
}

fn mean(m: &Matrix) -> f64 {
    m.data().iter().sum::<f64>() / m.rows().max(1) as f64
}

fn interpolate(real: &Matrix, fake: &Matrix, alpha: &[f64]) -> Matrix {
    let mut out = fake.clone();
    for (i, &a) in alpha.iter().enumerate() {
        for (o, r) in out.row_mut(i).iter_mut().zip(real.row(i)) {
            *o = a * r + (1.0 - a) * *o;
        }
    }
    out
}

/// Critic-side quantities of one pass. Index order is `[adv, diff, rep]`.
#[derive(Debug, Clone)]
pub struct CriticEval {
    pub t: usize,
    pub w: [f64; 3],
    pub gp: [f64; 3],
    pub l_mu: f64,
    /// `Σ (W_k − λ_k GP_k) − λ_mu L_mu`, maximised by the critics.
    pub objective: f64,
    /// Gradients of `−objective` (descent direction for each critic).
    pub grads: Option<[Gradients; 3]>,
}

/// Evaluates the critic objective on one batch, optionally with its
/// parameter gradients.
pub fn critic_pass(
    model: &TrainedModel,
    batch: &Batch,
    noise: &PassNoise,
    want_grads: bool,
) -> Result<CriticEval> {
    let cfg = &model.config;
    let m = materials(model, batch, noise)?;
    let real = [
        TrainedModel::adv_input(&batch.v0, &batch.a)?,
        model.diff_input(&m.v_prev, &m.v_t, &batch.r0, &batch.a, noise.t)?,
        TrainedModel::rep_input(&batch.v0, &batch.r0)?,
    ];
    let fake = [
        TrainedModel::adv_input(&m.fake_v0, &batch.a)?,
        model.diff_input(&m.fake_prev, &m.v_t, &batch.r0, &batch.a, noise.t)?,
        TrainedModel::rep_input(&m.fake_v0, &batch.r0)?,
    ];
    let nets = [&model.critics.adv, &model.critics.diff, &model.critics.rep];
    let lambdas = [cfg.lambda_gp_adv, cfg.lambda_gp_diff, cfg.lambda_gp_rep];
    let d_v = model.dims.d_v;

    let mut w = [0.0; 3];
    let mut gp = [0.0; 3];
    let mut gp_grads = Vec::with_capacity(3);
    for k in 0..3 {
        w[k] = mean(&nets[k].forward(&real[k])?) - mean(&nets[k].forward(&fake[k])?);
        let x_hat = interpolate(&real[k], &fake[k], &noise.alpha[k]);
        let (p, g) = nets[k].grad_penalty_grad_cols(&x_hat, 0..d_v, cfg.penalty_mode)?;
        gp[k] = p;
        gp_grads.push(g);
    }
    let kappa = model.schedule.n2d(noise.t);
    let l_mu = mutual_loss(w[0], w[1], w[2], kappa, cfg.gamma);
    let objective = (0..3).map(|k| w[k] - lambdas[k] * gp[k]).sum::<f64>() - cfg.lambda_mu * l_mu;

    let grads = if want_grads {
        let dmu = mutual_loss_grad(w[0], w[1], w[2], kappa, cfg.gamma);
        let n = batch.len() as f64;
        let up = Matrix::filled(batch.len(), 1, 1.0 / n);
        let mut out = Vec::with_capacity(3);
        for (k, gpk) in gp_grads.into_iter().enumerate() {
            // d(−objective)/dθ = −c_k ∂W_k/∂θ + λ_k ∂GP_k/∂θ
            let c = 1.0 - cfg.lambda_mu * dmu[k];
            let mut g = nets[k].grad_params(&fake[k], &up)?;
            g.add_scaled(&nets[k].grad_params(&real[k], &up)?, -1.0);
            let mut g = g.scaled(c);
            g.add_scaled(&gpk, lambdas[k]);
            out.push(g);
        }
        let [a, b, c]: [Gradients; 3] = out.try_into().expect("three critics");
        Some([a, b, c])
    } else {
        None
    };
    Ok(CriticEval {
        t: noise.t,
        w,
        gp,
        l_mu,
        objective,
        grads,
    })
}

/// Generator loss `−E D_adv(ṽ₀) − E D_diff(ṽ_{t−1}) − E D_rep(ṽ₀)` and its
/// gradient with respect to `G`'s parameters.
pub fn generator_pass(
    model: &TrainedModel,
    batch: &Batch,
    noise: &PassNoise,
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    let m = materials(model, batch, noise)?;
    let fake = [
        TrainedModel::adv_input(&m.fake_v0, &batch.a)?,
        model.diff_input(&m.fake_prev, &m.v_t, &batch.r0, &batch.a, noise.t)?,
        TrainedModel::rep_input(&m.fake_v0, &batch.r0)?,
    ];
    let nets = [&model.critics.adv, &model.critics.diff, &model.critics.rep];
    let loss = -(0..3)
        .map(|k| nets[k].forward(&fake[k]).map(|o| mean(&o)))
        .sum::<Result<f64>>()?;
    if !want_grads {
        return Ok((loss, None));
    }
    let n = batch.len();
    let d_v = model.dims.d_v;
    let up = Matrix::filled(n, 1, -1.0 / n as f64);
    let (c0, _) = model.schedule.posterior_coefficients(noise.t);
    let mut dv0 = Matrix::zeros(n, d_v);
    for (k, scale) in [(0, 1.0), (1, c0), (2, 1.0)] {
        let gi = nets[k].grad_input_upstream(&fake[k], &up)?;
        dv0.axpy(scale, &gi.columns(0..d_v))?;
    }
    let tr = model.gens.g.forward_trace(&m.g_in)?;
    let (g, _) = model.gens.g.backward(&tr, &dv0, true)?;
    Ok((loss, g))
}

/// Noise of one `R` pass.
#[derive(Debug, Clone)]
pub struct RepNoise {
    pub t: usize,
    pub z: Matrix,
    pub eps: Matrix,
}

impl RepNoise {
    pub fn draw(n: usize, dims: &ModelDims, rng: &mut Rng) -> Self {
        let t = 1 + rng.below(dims.steps);
        Self {
            t,
            z: rng.normal_matrix(n, dims.z_dim),
            eps: rng.normal_matrix(n, dims.d_r),
        }
    }
}

/// Denoising loss `mean_i ‖r₀ − R(a, t, r_t, z)‖₂` and its gradient.
pub fn r_pass(
    model: &TrainedModel,
    batch: &Batch,
    noise: &RepNoise,
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let r_t = model
        .schedule
        .diffuse_marginal_with(&batch.r0, noise.t, &noise.eps)?;
    let x = model.r_input(&batch.a, noise.t, &r_t, &noise.z)?;
    let tr = model.gens.r.forward_trace(&x)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut up = Matrix::zeros(batch.len(), model.dims.d_r);
    for i in 0..batch.len() {
        let e: Vec<f64> = tr
            .output
            .row(i)
            .iter()
            .zip(batch.r0.row(i))
            .map(|(o, r)| o - r)
            .collect();
        let sq = e.iter().map(|x| x * x).sum::<f64>();
        // ε only guards the gradient; the reported loss is the exact norm
        let norm = (sq + NORM_EPS).sqrt();
        loss += sq.sqrt() / n;
        for (u, ei) in up.row_mut(i).iter_mut().zip(&e) {
            *u = ei / (norm * n);
        }
    }
    if !want_grads {
        return Ok((loss, None));
    }
    let (g, _) = model.gens.r.backward(&tr, &up, true)?;
    Ok((loss, g))
}

/// Per-epoch averages and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub w_adv: f64,
    pub w_diff: f64,
    pub w_rep: f64,
    pub gp_adv: f64,
    pub gp_diff: f64,
    pub gp_rep: f64,
    pub l_mu: f64,
    pub g_loss: f64,
    pub r_loss: f64,
    pub delta_adv_seen: f64,
    pub delta_adv_unseen: f64,
    pub delta_diff: f64,
}

impl EpochTrace {
    pub const CSV_HEADER: &'static str =
        "epoch,w_adv,w_diff,w_rep,gp_adv,gp_diff,gp_rep,l_mu,g_loss,r_loss,delta_adv_seen,delta_adv_unseen,delta_diff";

    pub fn values(&self) -> [f64; 12] {
        [
            self.w_adv,
            self.w_diff,
            self.w_rep,
            self.gp_adv,
            self.gp_diff,
            self.gp_rep,
            self.l_mu,
            self.g_loss,
            self.r_loss,
            self.delta_adv_seen,
            self.delta_adv_unseen,
            self.delta_diff,
        ]
    }
}

/// Writes a trace as CSV text.
pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut s = String::from(EpochTrace::CSV_HEADER);
    s.push('\n');
    for e in trace {
        s.push_str(&e.epoch.to_string());
        for v in e.values() {
            s.push(',');
            s.push_str(&format!("{v:e}"));
        }
        s.push('\n');
    }
    s
}

fn adv_scores(model: &TrainedModel, data: &EmbeddedSet, rows: &[usize]) -> Result<Matrix> {
    let b = data.batch(rows);
    model
        .critics
        .adv
        .forward(&TrainedModel::adv_input(&b.v0, &b.a)?)
}

fn mean_gap(x: &Matrix, y: &Matrix) -> f64 {
    mean(x) - mean(y)
}

/// `E D_adv(seen train) − E D_adv(seen test)`.
pub fn delta_adv_seen(model: &TrainedModel, data: &EmbeddedSet) -> Result<f64> {
    let (tr, te) = (data.visual.train_rows(), data.visual.seen_test_rows());
    if tr.is_empty() || te.is_empty() {
        return Err(Error::Empty("seen train or seen test split"));
    }
    Ok(mean_gap(
        &adv_scores(model, data, &tr)?,
        &adv_scores(model, data, &te)?,
    ))
}

/// `E D_adv(seen train) − E D_adv(unseen)`.
pub fn delta_adv_unseen(model: &TrainedModel, data: &EmbeddedSet) -> Result<f64> {
    let (tr, un) = (data.visual.train_rows(), data.visual.unseen_rows());
    if tr.is_empty() || un.is_empty() {
        return Err(Error::Empty("seen train or unseen split"));
    }
    Ok(mean_gap(
        &adv_scores(model, data, &tr)?,
        &adv_scores(model, data, &un)?,
    ))
}

/// `E D_diff(v_{t−1}, v_t) − E D_diff(ṽ_{t−1}, v_t)` over the seen training
/// rows, with noise from `rng`.
pub fn delta_diff(
    model: &TrainedModel,
    data: &EmbeddedSet,
    t: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let tr = data.visual.train_rows();
    if tr.is_empty() {
        return Err(Error::Empty("seen train split"));
    }
    let b = data.batch(&tr);
    let noise = PassNoise::draw_at(b.len(), t, &model.dims, rng);
    let m = materials(model, &b, &noise)?;
    let real = model
        .critics
        .diff
        .forward(&model.diff_input(&m.v_prev, &m.v_t, &b.r0, &b.a, t)?)?;
    let fake =
        model
            .critics
            .diff
            .forward(&model.diff_input(&m.fake_prev, &m.v_t, &b.r0, &b.a, t)?)?;
    Ok(mean_gap(&real, &fake))
}

/// `W_adv` between real rows and the generator's fakes as judged by a
/// critic trained from scratch for `steps` updates. Unlike the training
/// critic's running estimate this is comparable across generator snapshots.
pub fn fresh_critic_w_adv(
    model: &TrainedModel,
    data: &EmbeddedSet,
    rows: &[usize],
    steps: usize,
    rng: &Rng,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("rows for the critic estimate"));
    }
    let cfg = &model.config;
    let d_v = model.dims.d_v;
    let mut critic = Mlp::new(
        &[model.dims.adv_in(), cfg.hidden, 1],
        Activation::LeakyRelu,
        Activation::Identity,
        &mut rng.substream("init"),
    )?;
    let mut opt = Adam::new(&critic, cfg.adam);
    let mut r = rng.substream("steps");
    let k = cfg.batch.min(rows.len());
    for _ in 0..steps {
        let pick: Vec<usize> = (0..k).map(|_| rows[r.below(rows.len())]).collect();
        let b = data.batch(&pick);
        let noise = PassNoise::draw(k, &model.dims, &mut r);
        let m = materials(model, &b, &noise)?;
        let real = TrainedModel::adv_input(&b.v0, &b.a)?;
        let fake = TrainedModel::adv_input(&m.fake_v0, &b.a)?;
        let up = Matrix::filled(k, 1, 1.0 / k as f64);
        let mut g = critic.grad_params(&fake, &up)?;
        g.add_scaled(&critic.grad_params(&real, &up)?, -1.0);
        let x_hat = interpolate(&real, &fake, &noise.alpha[0]);
        let (_, gp) = critic.grad_penalty_grad_cols(&x_hat, 0..d_v, cfg.penalty_mode)?;
        g.add_scaled(&gp, cfg.lambda_gp_adv);
        opt.step(&mut critic, &g);
    }
    let b = data.batch(rows);
    let noise = PassNoise::draw(rows.len(), &model.dims, &mut rng.substream("eval"));
    let m = materials(model, &b, &noise)?;
    let real = critic.forward(&TrainedModel::adv_input(&b.v0, &b.a)?)?;
    let fake = critic.forward(&TrainedModel::adv_input(&m.fake_v0, &b.a)?)?;
    Ok(mean_gap(&real, &fake))
}

fn guard(epoch: usize, what: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            what: what.into(),
        })
    }
}

/// Alternating min–max training on the seen-class training rows of `data`.
///
/// Returns the trained model and one trace entry per epoch. Draws
/// initialisation, batching and noise from named substreams of `rng`.
pub fn train(
    data: &EmbeddedSet,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<(TrainedModel, Vec<EpochTrace>)> {
    cfg.validate()?;
    let rows = data.visual.train_rows();
    if rows.is_empty() {
        return Err(Error::Empty("seen-class training rows"));
    }
    let dims = ModelDims {
        d_v: data.d_v(),
        d_r: data.d_r(),
        d_a: data.d_a(),
        z_dim: cfg.z_dim,
        steps: sched.steps(),
        one_hot_t: cfg.one_hot_t,
    };
    let mut model =
        TrainedModel::init(dims, sched.clone(), cfg.clone(), &mut rng.substream("init"))?;
    let mut opt_g = Adam::new(&model.gens.g, cfg.adam);
    let mut opt_r = Adam::new(
        &model.gens.r,
        AdamConfig {
            lr: cfg.r_lr,
            beta1: 0.9,
            ..cfg.adam
        },
    );
    let mut opt_d = [
        Adam::new(&model.critics.adv, cfg.adam),
        Adam::new(&model.critics.diff, cfg.adam),
        Adam::new(&model.critics.rep, cfg.adam),
    ];

    let mut order_rng = rng.substream("order");
    let mut noise_rng = rng.substream("noise");
    let delta_rng = rng.substream("delta");
    let has_seen_test = !data.visual.seen_test_rows().is_empty();
    let has_unseen = !data.visual.unseen_rows().is_empty();

    let mut order = rows.clone();
    let mut cursor = order.len();
    let mut next_batch = |order_rng: &mut Rng| -> Vec<usize> {
        let mut out = Vec::with_capacity(cfg.batch);
        while out.len() < cfg.batch.min(rows.len()) {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            out.push(order[cursor]);
            cursor += 1;
        }
        out
    };

    let critic_batches = rows.len().div_ceil(cfg.batch);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = [0.0; 7];
        let (mut n_c, mut g_sum, mut r_sum, mut n_g) = (0usize, 0.0, 0.0, 0usize);
        let mut done = 0;
        while done < critic_batches {
            for _ in 0..cfg.critic_steps {
                let b = data.batch(&next_batch(&mut order_rng));
                let noise = PassNoise::draw(b.len(), &dims, &mut noise_rng);
                let ev = critic_pass(&model, &b, &noise, true)?;
                guard(epoch, "critic objective", ev.objective)?;
                let [ga, gd, gr] = ev.grads.expect("requested");
                opt_d[0].step(&mut model.critics.adv, &ga);
                opt_d[1].step(&mut model.critics.diff, &gd);
                opt_d[2].step(&mut model.critics.rep, &gr);
                let vals = [
                    ev.w[0], ev.w[1], ev.w[2], ev.gp[0], ev.gp[1], ev.gp[2], ev.l_mu,
                ];
                for (a, v) in acc.iter_mut().zip(vals) {
                    *a += v;
                }
                n_c += 1;
                done += 1;
            }
            let b = data.batch(&next_batch(&mut order_rng));
            let noise = PassNoise::draw(b.len(), &dims, &mut noise_rng);
            let (gl, gg) = generator_pass(&model, &b, &noise, true)?;
            guard(epoch, "generator loss", gl)?;
            opt_g.step(&mut model.gens.g, &gg.expect("requested"));
            let rn = RepNoise::draw(b.len(), &dims, &mut noise_rng);
            let (rl, rg) = r_pass(&model, &b, &rn, true)?;
            guard(epoch, "representation loss", rl)?;
            opt_r.step(&mut model.gens.r, &rg.expect("requested"));
            g_sum += gl;
            r_sum += rl;
            n_g += 1;
        }
        let nets_ok = model.gens.g.is_finite()
            && model.gens.r.is_finite()
            && model.critics.adv.is_finite()
            && model.critics.diff.is_finite()
            && model.critics.rep.is_finite();
        if !nets_ok {
            return Err(Error::Diverged {
                epoch,
                what: "network parameters".into(),
            });
        }
        let avg = |x: f64, n: usize| x / n.max(1) as f64;
        let mut dr = delta_rng.clone();
        let dd: f64 = (1..=sched.steps())
            .map(|t| delta_diff(&model, data, t, &mut dr))
            .sum::<Result<f64>>()?
            / sched.steps() as f64;
        trace.push(EpochTrace {
            epoch: epoch + 1,
            w_adv: avg(acc[0], n_c),
            w_diff: avg(acc[1], n_c),
            w_rep: avg(acc[2], n_c),
            gp_adv: avg(acc[3], n_c),
            gp_diff: avg(acc[4], n_c),
            gp_rep: avg(acc[5], n_c),
            l_mu: avg(acc[6], n_c),
            g_loss: avg(g_sum, n_g),
            r_loss: avg(r_sum, n_g),
            delta_adv_seen: if has_seen_test {
                delta_adv_seen(&model, data)?
            } else {
                f64::NAN
            },
            delta_adv_unseen: if has_unseen {
                delta_adv_unseen(&model, data)?
            } else {
                f64::NAN
            },
            delta_diff: dd,
        });
    }
    Ok((model, trace))
}
