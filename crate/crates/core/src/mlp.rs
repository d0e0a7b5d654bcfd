//! Small dense feed-forward networks with exact first- and second-order
//! reverse-mode gradients.
//!
//! Row vectors flow through the network: layer `l` computes
//! `z_l = h_{l-1} W_l + b_l` and `h_l = act_l(z_l)` with `W_l` stored
//! `in × out`. The second-order path differentiates the input-gradient
//! recurrence itself, which is what the gradient penalty of a critic needs.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Guards the square root of the gradient norm at zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Sigmoid,
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// First derivative; the kink at 0 takes the positive branch.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Relu => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            _ => 0.0,
        }
    }

    fn is_piecewise_linear(self) -> bool {
        !matches!(self, Activation::Sigmoid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn preactivation(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = h.matmul(&self.weight)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }
}

/// How the parameter gradient of the gradient penalty is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyGradMode {
    /// Reverse mode through the input-gradient recurrence.
    #[default]
    Exact,
    /// Central difference of first-order parameter gradients along the
    /// penalty's input-space adjoint. For debugging only.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Gradients with the same layout as an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.output_dim()])
                .collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(s, b).expect("gradient layouts match");
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|x| *x *= s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= s);
        }
        self
    }

    /// Weights then bias of each layer, in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|x| x.is_finite())
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer: `h_0 .. h_{L-1}`.
    pub inputs: Vec<Matrix>,
    /// Pre-activations `z_1 .. z_L`.
    pub pre: Vec<Matrix>,
    pub output: Matrix,
}

impl Mlp {
    /// Random initialisation (Glorot uniform weights, zero biases).
    ///
    /// `dims` lists every width including input and output. Hidden layers
    /// use `hidden`, the last layer uses `output`.
    pub fn new(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer dims must have at least two positive entries, got {dims:?}"
            )));
        }
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                    .collect();
                Layer {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n_layers { output } else { hidden },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("mlp layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    l.output_dim(),
                    format!("bias {} in layer {i}", l.bias.len()),
                ));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    layers[i - 1].output_dim(),
                    format!("input {} in layer {i}", l.input_dim()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::output_dim));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::shape("Mlp::set_params", self.num_params(), p.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight.data_mut().copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    fn check_scalar(&self) -> Result<()> {
        match self.output_dim() {
            1 => Ok(()),
            n => Err(Error::NonScalarOutput(n)),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            let act = l.activation;
            h = l.preactivation(&h)?.map(|z| act.apply(z));
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let act = l.activation;
            let z = l.preactivation(&h)?;
            let next = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Reverse pass for the scalar `⟨upstream, output⟩`. Returns parameter
    /// gradients (when requested) and the input gradient.
    pub fn backward(
        &self,
        trace: &Trace,
        upstream: &Matrix,
        want_params: bool,
    ) -> Result<(Option<Gradients>, Matrix)> {
        if upstream.shape() != trace.output.shape() {
            return Err(Error::shape(
                "mlp backward upstream",
                format!("{:?}", trace.output.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads = want_params.then(|| Gradients::zeros_like(self));
        let mut g = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            let delta = g.zip_map(&trace.pre[l], |gv, z| gv * act.derivative(z))?;
            if let Some(gr) = grads.as_mut() {
                gr.weights[l] = trace.inputs[l].t_matmul(&delta)?;
                gr.biases[l] = delta.sum_rows();
            }
            g = delta.matmul_t(&layer.weight)?;
        }
        Ok((grads, g))
    }

    /// Exact gradient of `⟨upstream, forward(x)⟩` with respect to every parameter.
    pub fn grad_params(&self, x: &Matrix, upstream: &Matrix) -> Result<Gradients> {
        let trace = self.forward_trace(x)?;
        let (g, _) = self.backward(&trace, upstream, true)?;
        Ok(g.expect("requested"))
    }

    /// Input gradient of `⟨upstream, forward(x)⟩`.
    pub fn grad_input_upstream(&self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        let trace = self.forward_trace(x)?;
        Ok(self.backward(&trace, upstream, false)?.1)
    }

    /// `∇ₓ D(x)` for each row of a scalar-output network.
    pub fn grad_input(&self, x: &Matrix) -> Result<Matrix> {
        self.check_scalar()?;
        self.grad_input_upstream(x, &Matrix::filled(x.rows(), 1, 1.0))
    }

    /// Gradient penalty `mean_i (‖∇ D(x̂_i)‖₂ − 1)²` over all input columns,
    /// with its exact parameter gradient.
    pub fn grad_penalty_grad(&self, x_hat: &Matrix) -> Result<(f64, Gradients)> {
        self.grad_penalty_grad_cols(x_hat, 0..self.input_dim(), PenaltyGradMode::Exact)
    }

    /// Gradient penalty where the norm covers only the input columns in
    /// `cols` (the conditioning columns are held fixed).
    pub fn grad_penalty_grad_cols(
        &self,
        x_hat: &Matrix,
        cols: Range<usize>,
        mode: PenaltyGradMode,
    ) -> Result<(f64, Gradients)> {
        self.check_scalar()?;
        self.check_input(x_hat)?;
        if cols.is_empty() || cols.end > self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "penalty columns {cols:?} outside input width {}",
                self.input_dim()
            )));
        }
        let n = x_hat.rows();
        if n == 0 {
            return Err(Error::Empty("gradient penalty batch"));
        }
        let trace = self.forward_trace(x_hat)?;
        let n_layers = self.layers.len();

        // Input-gradient recurrence, keeping g_l (gradient w.r.t. h_l) and δ_l.
        let mut gs: Vec<Matrix> = vec![Matrix::zeros(0, 0); n_layers + 1];
        let mut deltas: Vec<Matrix> = vec![Matrix::zeros(0, 0); n_layers];
        gs[n_layers] = Matrix::filled(n, 1, 1.0);
        for l in (0..n_layers).rev() {
            let act = self.layers[l].activation;
            let d = gs[l + 1].zip_map(&trace.pre[l], |g, z| g * act.derivative(z))?;
            gs[l] = d.matmul_t(&self.layers[l].weight)?;
            deltas[l] = d;
        }

        // Penalty and its adjoint with respect to the input gradient.
        let mut penalty = 0.0;
        let mut g_bar = Matrix::zeros(n, self.input_dim());
        for i in 0..n {
            let u = &gs[0].row(i)[cols.clone()];
            let norm = (u.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            penalty += (norm - 1.0).powi(2);
            let coef = 2.0 * (norm - 1.0) / (norm * n as f64);
            let out = &mut g_bar.row_mut(i)[cols.clone()];
            for (o, &uj) in out.iter_mut().zip(u) {
                *o = coef * uj;
            }
        }
        penalty /= n as f64;

        let grads = match mode {
            PenaltyGradMode::Exact => self.penalty_reverse(&trace, &gs, &deltas, g_bar)?,
            PenaltyGradMode::FiniteDifference => self.penalty_fd(x_hat, &g_bar)?,
        };
        Ok((penalty, grads))
    }

    fn penalty_reverse(
        &self,
        trace: &Trace,
        gs: &[Matrix],
        deltas: &[Matrix],
        g0_bar: Matrix,
    ) -> Result<Gradients> {
        let n_layers = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        // Adjoints of z_l contributed through the input-gradient recurrence.
        let mut z_bar2: Vec<Option<Matrix>> = vec![None; n_layers];
        let mut g_bar = g0_bar;
        for l in 0..n_layers {
            let layer = &self.layers[l];
            let act = layer.activation;
            // g_{l} (input side) = δ_l W_lᵀ
            let delta_bar = g_bar.matmul(&layer.weight)?;
            grads.weights[l].axpy(1.0, &g_bar.t_matmul(&deltas[l])?)?;
            // δ_l = g_{l+1} ⊙ σ'(z_l)
            g_bar = delta_bar.zip_map(&trace.pre[l], |d, z| d * act.derivative(z))?;
            if !act.is_piecewise_linear() {
                let mut zb = delta_bar.zip_map(&gs[l + 1], |d, g| d * g)?;
                zb = zb.zip_map(&trace.pre[l], |v, z| v * act.second_derivative(z))?;
                z_bar2[l] = Some(zb);
            }
        }
        // Back through the forward pass; the penalty does not read the output.
        let mut h_bar: Option<Matrix> = None;
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let act = layer.activation;
            let mut z_bar = match &h_bar {
                Some(hb) => hb.zip_map(&trace.pre[l], |h, z| h * act.derivative(z))?,
                None => Matrix::zeros(trace.pre[l].rows(), trace.pre[l].cols()),
            };
            if let Some(zb) = &z_bar2[l] {
                z_bar.axpy(1.0, zb)?;
            }
            if h_bar.is_none() && z_bar2[l].is_none() {
                continue;
            }
            grads.weights[l].axpy(1.0, &trace.inputs[l].t_matmul(&z_bar)?)?;
            for (b, s) in grads.biases[l].iter_mut().zip(z_bar.sum_rows()) {
                *b += s;
            }
            if l > 0 {
                h_bar = Some(z_bar.matmul_t(&layer.weight)?);
            }
        }
        Ok(grads)
    }

    fn penalty_fd(&self, x_hat: &Matrix, g_bar: &Matrix) -> Result<Gradients> {
        // ∇θ Σ_i ⟨ḡ_i, ∇ₓD(x_i)⟩ ≈ [∇θ Σ_i D(x_i + h ḡ_i) − ∇θ Σ_i D(x_i − h ḡ_i)] / 2h
        let scale = g_bar.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return Ok(Gradients::zeros_like(self));
        }
        let h = 1e-5 / scale;
        let mut plus = x_hat.clone();
        plus.axpy(h, g_bar)?;
        let mut minus = x_hat.clone();
        minus.axpy(-h, g_bar)?;
        let ones = Matrix::filled(x_hat.rows(), 1, 1.0);
        let mut g = self.grad_params(&plus, &ones)?;
        g.add_scaled(&self.grad_params(&minus, &ones)?, -1.0);
        Ok(g.scaled(1.0 / (2.0 * h)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: &[f64]) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Matrix::from_vec(w.len(), 1, w.to_vec()).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn identity_network_is_identity() {
        let net = Mlp::from_layers(vec![Layer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Rng::new(1).normal_matrix(5, 3);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn relu_hand_example() {
        let net = Mlp::from_layers(vec![Layer {
            weight: Matrix::identity(2),
            bias: vec![1.0, 1.0],
            activation: Activation::Relu,
        }])
        .unwrap();
        let y = net.forward(&Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_param_gradient_is_input() {
        let net = linear(&[0.3, -0.7, 1.1]);
        let x = Matrix::row_vector(&[2.0, 5.0, -1.0]);
        let g = net.grad_params(&x, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.weights[0].data(), x.data());
        assert_eq!(g.biases[0], vec![1.0]);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let mut rng = Rng::new(4);
        let net = Mlp::new(
            &[3, 8, 2],
            Activation::LeakyRelu,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let x = rng.normal_matrix(6, 3);
        let g = net.grad_params(&x, &Matrix::zeros(6, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_critic_input_gradient_is_weight() {
        let w = [0.5, -2.0, 3.0];
        let net = linear(&w);
        let x = Rng::new(9).normal_matrix(4, 3);
        let g = net.grad_input(&x).unwrap();
        for r in g.iter_rows() {
            assert_eq!(r, &w);
        }
    }

    #[test]
    fn penalty_linear_cases() {
        let (p, g) = linear(&[0.6, 0.8])
            .grad_penalty_grad(&Matrix::row_vector(&[1.0, 2.0]))
            .unwrap();
        assert!(p.abs() < 1e-20);
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-10));

        let (p, g) = linear(&[2.0, 0.0])
            .grad_penalty_grad(&Matrix::row_vector(&[0.3, -0.1]))
            .unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        // 2(‖w‖ − 1) w / ‖w‖
        let gw = g.weights[0].data();
        assert!((gw[0] - 2.0).abs() < 1e-10 && gw[1].abs() < 1e-12);
        assert_eq!(g.biases[0], vec![0.0]);
    }

    #[test]
    fn non_scalar_critic_rejected() {
        let mut rng = Rng::new(1);
        let net = Mlp::new(
            &[2, 3],
            Activation::Identity,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            net.grad_input(&Matrix::zeros(1, 2)),
            Err(Error::NonScalarOutput(3))
        ));
        assert!(net.grad_penalty_grad(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = Rng::new(1);
        let net = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert!(net.forward(&Matrix::zeros(1, 3)).is_err());
        assert!(net
            .grad_params(&Matrix::zeros(1, 2), &Matrix::zeros(2, 1))
            .is_err());
    }

    #[test]
    fn zero_gradient_row_is_finite() {
        let net = linear(&[0.0, 0.0]);
        let (p, g) = net
            .grad_penalty_grad(&Matrix::row_vector(&[1.0, 1.0]))
            .unwrap();
        assert!((p - 1.0).abs() < 1e-5);
        assert!(g.is_finite());
    }
}
