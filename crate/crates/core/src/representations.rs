//! Cross-entropy and supervised-contrastive encoders.
//!
//! `f_ce` produces the visual features `v₀` every later stage generates in;
//! `f_sc` produces unit-norm contrastive representations `r₀` used as
//! instance-level semantics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{FeatureSet, Split};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::mlp::{Activation, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;

/// Mean softmax cross-entropy.
pub fn ce_loss(logits: &Matrix, y: &[usize]) -> Result<f64> {
    Ok(ce_loss_grad(logits, y)?.0)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn ce_loss_grad(logits: &Matrix, y: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != y.len() {
        return Err(Error::shape("ce_loss", logits.rows(), y.len()));
    }
    if y.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let n = y.len() as f64;
    let c = logits.cols();
    let mut grad = Matrix::zeros(logits.rows(), c);
    let mut loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[label];
        let g = grad.row_mut(i);
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - lse).exp() / n;
        }
        g[label] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Supervised contrastive loss.
///
/// For anchor `i`, positive `p` (same label) and negatives `k` (other
/// labels), the term is `−log(e^{s_ip/τ} / (e^{s_ip/τ} + Σ_k e^{s_ik/τ}))`
/// with `s = hᵢᵀhⱼ`. Terms are averaged over each anchor's positives, then
/// over anchors; anchors without a positive are skipped.
pub fn sc_loss(h: &Matrix, y: &[usize], tau: f64) -> Result<f64> {
    Ok(sc_loss_grad(h, y, tau)?.0)
}

pub fn sc_loss_grad(h: &Matrix, y: &[usize], tau: f64) -> Result<(f64, Matrix)> {
    if h.rows() != y.len() {
        return Err(Error::shape("sc_loss", h.rows(), y.len()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let n = y.len();
    let sim = h.matmul_t(h)?;
    // coefficient of s_ij in the loss
    let mut coef = Matrix::zeros(n, n);
    let mut anchors = 0usize;
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let neg: Vec<usize> = (0..n).filter(|&j| y[j] != y[i]).collect();
        anchors += 1;
        let w = 1.0 / pos.len() as f64;
        let neg_logits: Vec<f64> = neg.iter().map(|&k| sim[(i, k)] / tau).collect();
        for &p in &pos {
            let lp = sim[(i, p)] / tau;
            let m = neg_logits.iter().cloned().fold(lp, f64::max);
            let mut denom = (lp - m).exp();
            denom += neg_logits.iter().map(|l| (l - m).exp()).sum::<f64>();
            let lse = m + denom.ln();
            total += w * (lse - lp);
            coef[(i, p)] += w * ((lp - lse).exp() - 1.0) / tau;
            for (&k, &lk) in neg.iter().zip(&neg_logits) {
                coef[(i, k)] += w * (lk - lse).exp() / tau;
            }
        }
    }
    if anchors == 0 {
        return Err(Error::InvalidArgument(
            "no anchor has a positive in the batch".into(),
        ));
    }
    let scale = 1.0 / anchors as f64;
    // ∂s_ij/∂h_i = h_j and ∂s_ij/∂h_j = h_i
    let sym = coef.add(&coef.transpose())?;
    let grad = sym.matmul(h)?.scale(scale);
    Ok((total * scale, grad))
}

pub fn l2_normalize_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = dot(r, r).sqrt().max(1e-12);
        r.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Gradient through `y = z / ‖z‖` given `∂L/∂y`.
pub fn l2_normalize_backward(z: &Matrix, dy: &Matrix) -> Matrix {
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let zr = z.row(i);
        let n = dot(zr, zr).sqrt().max(1e-12);
        let g = dy.row(i);
        let proj = zr.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (n * n);
        for ((o, &zj), &gj) in dz.row_mut(i).iter_mut().zip(zr).zip(g) {
            *o = (gj - zj * proj) / n;
        }
    }
    dz
}

/// Mean pairwise cosine distance within each class with at least two rows.
pub fn intra_class_variation(h: &Matrix, y: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if h.rows() != y.len() {
        return Err(Error::shape("intra_class_variation", h.rows(), y.len()));
    }
    let unit = l2_normalize_rows(h);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in y.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (c, rows) in by_class {
        if rows.len() < 2 {
            continue;
        }
        // mean over pairs of 1 − cos = 1 − (‖Σu‖² − n) / (n(n − 1))
        let mut s = vec![0.0; h.cols()];
        for &i in &rows {
            for (a, b) in s.iter_mut().zip(unit.row(i)) {
                *a += b;
            }
        }
        let n = rows.len() as f64;
        let self_sum: f64 = rows.iter().map(|&i| dot(unit.row(i), unit.row(i))).sum();
        let mean_cos = (dot(&s, &s) - self_sum) / (n * (n - 1.0));
        out.insert(c, 1.0 - mean_cos);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Width of the visual features `v₀`.
    pub d_v: usize,
    /// Width of the contrastive representations `r₀`.
    pub d_r: usize,
    pub hidden: usize,
    pub tau: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_v: 32,
            d_r: 16,
            hidden: 128,
            tau: 0.1,
            epochs: 20,
            batch: 128,
            lr: 1e-3,
        }
    }
}

/// Frozen encoders plus the standardisation applied to `v₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub f_ce: Mlp,
    pub ce_head: Mlp,
    pub f_sc: Mlp,
    pub tau: f64,
    pub v_mean: Vec<f64>,
    pub v_std: Vec<f64>,
}

impl EncoderPair {
    /// Raw `f_ce` output, before standardisation.
    pub fn ce_features(&self, x: &Matrix) -> Result<Matrix> {
        self.f_ce.forward(x)
    }

    /// Standardised visual features `v₀`.
    pub fn extract_v(&self, x: &Matrix) -> Result<Matrix> {
        let mut v = self.f_ce.forward(x)?;
        for i in 0..v.rows() {
            for ((x, m), s) in v.row_mut(i).iter_mut().zip(&self.v_mean).zip(&self.v_std) {
                *x = (*x - m) / s;
            }
        }
        Ok(v)
    }

    /// Unit-norm contrastive representations `r₀`.
    pub fn extract_r(&self, x: &Matrix) -> Result<Matrix> {
        Ok(l2_normalize_rows(&self.f_sc.forward(x)?))
    }

    pub fn embed(&self, fs: &FeatureSet) -> Result<EmbeddedSet> {
        Ok(EmbeddedSet {
            visual: fs.with_features(self.extract_v(&fs.features)?)?,
            contrastive: self.extract_r(&fs.features)?,
        })
    }
}

/// A feature set mapped through the encoders: `visual.features` holds `v₀`
/// and `contrastive` holds the row-aligned `r₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSet {
    pub visual: FeatureSet,
    pub contrastive: Matrix,
}

/// Row-aligned training tuples `(v₀, r₀, a, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub v0: Matrix,
    pub r0: Matrix,
    pub a: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl EmbeddedSet {
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let labels: Vec<usize> = rows.iter().map(|&i| self.visual.labels[i]).collect();
        Batch {
            v0: self.visual.features.select_rows(rows),
            r0: self.contrastive.select_rows(rows),
            a: self.visual.semantics_for(&labels),
            labels,
        }
    }

    pub fn d_v(&self) -> usize {
        self.visual.feature_dim()
    }

    pub fn d_r(&self) -> usize {
        self.contrastive.cols()
    }

    pub fn d_a(&self) -> usize {
        self.visual.semantic_dim()
    }
}

/// Trains `f_ce` (with a linear classification head) by cross-entropy and
/// `f_sc` by the supervised contrastive loss on seen-class training rows.
pub fn train_encoders(fs: &FeatureSet, cfg: &EncoderConfig, rng: &mut Rng) -> Result<EncoderPair> {
    let train = fs.train_rows();
    let seen = fs.seen_classes();
    let present: std::collections::BTreeSet<usize> = train.iter().map(|&i| fs.labels[i]).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "encoders need at least 2 training classes, found {}",
            present.len()
        )));
    }
    if cfg.batch < 2 || cfg.d_v == 0 || cfg.d_r == 0 || cfg.hidden == 0 {
        return Err(Error::InvalidArgument(
            "encoder widths and batch must be positive".into(),
        ));
    }
    let head_index: BTreeMap<usize, usize> =
        seen.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let d_raw = fs.feature_dim();
    let mut init = rng.substream("init");
    let mut f_ce = Mlp::new(
        &[d_raw, cfg.hidden, cfg.d_v],
        Activation::LeakyRelu,
        Activation::Identity,
        &mut init,
    )?;
    let mut ce_head = Mlp::new(
        &[cfg.d_v, seen.len()],
        Activation::Identity,
        Activation::Identity,
        &mut init,
    )?;
    let mut f_sc = Mlp::new(
        &[d_raw, cfg.hidden, cfg.d_r],
        Activation::LeakyRelu,
        Activation::Identity,
        &mut init,
    )?;
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        ..AdamConfig::default()
    };
    let mut opt_ce = Adam::new(&f_ce, adam);
    let mut opt_head = Adam::new(&ce_head, adam);
    let mut opt_sc = Adam::new(&f_sc, adam);

    let mut order = train.clone();
    let mut shuffle = rng.substream("shuffle");
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let x = fs.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| head_index[&fs.labels[i]]).collect();

            let tr = f_ce.forward_trace(&x)?;
            let htr = ce_head.forward_trace(&tr.output)?;
            let (_, dlogits) = ce_loss_grad(&htr.output, &y)?;
            let (gh, dv) = ce_head.backward(&htr, &dlogits, true)?;
            let (gf, _) = f_ce.backward(&tr, &dv, true)?;
            opt_head.step(&mut ce_head, &gh.expect("requested"));
            opt_ce.step(&mut f_ce, &gf.expect("requested"));

            let str_ = f_sc.forward_trace(&x)?;
            let h = l2_normalize_rows(&str_.output);
            let labels: Vec<usize> = chunk.iter().map(|&i| fs.labels[i]).collect();
            let Ok((_, dh)) = sc_loss_grad(&h, &labels, cfg.tau) else {
                continue;
            };
            let dz = l2_normalize_backward(&str_.output, &dh);
            let (gs, _) = f_sc.backward(&str_, &dz, true)?;
            opt_sc.step(&mut f_sc, &gs.expect("requested"));
        }
    }
    if !(f_ce.is_finite() && f_sc.is_finite() && ce_head.is_finite()) {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            what: "encoder parameters".into(),
        });
    }

    let v = f_ce.forward(&fs.features.select_rows(&train))?;
    let v_mean = v.mean_rows();
    let mut v_std = vec![0.0; v.cols()];
    for r in v.iter_rows() {
        for ((s, x), m) in v_std.iter_mut().zip(r).zip(&v_mean) {
            *s += (x - m).powi(2);
        }
    }
    let n = v.rows() as f64;
    let v_std = v_std
        .into_iter()
        .map(|s| (s / n).sqrt().max(1e-6))
        .collect();
    Ok(EncoderPair {
        f_ce,
        ce_head,
        f_sc,
        tau: cfg.tau,
        v_mean,
        v_std,
    })
}

/// Split-aware accessor used by tests and reports.
pub fn rows_of(fs: &FeatureSet, split: Split, seen: bool) -> Vec<usize> {
    (0..fs.len())
        .filter(|&i| fs.splits[i] == split && fs.seen[fs.labels[i]] == seen)
        .collect()
}
