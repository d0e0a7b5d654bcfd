//! Generating stage: fully-noised generation, test-time adaptation of `G`,
//! partial-denoise generation from real test features, classifiers and
//! ZSL/GZSL evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gan::TrainedModel;
use crate::matrix::{norm, Matrix};
use crate::mlp::{Activation, Mlp, NORM_EPS};
use crate::optim::{Adam, AdamConfig};
use crate::representations::{ce_loss_grad, l2_normalize_rows, EmbeddedSet};
use crate::rng::Rng;

/// Feature space of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Modality {
    /// `v₀`
    V,
    /// `v₀ ‖ r₀`
    #[default]
    #[serde(rename = "VC")]
    VC,
    /// `v₀ ‖ r₀ ‖ a`
    #[serde(rename = "VCS")]
    VCS,
}

impl Modality {
    pub fn input_dim(self, d_v: usize, d_r: usize, d_a: usize) -> usize {
        match self {
            Modality::V => d_v,
            Modality::VC => d_v + d_r,
            Modality::VCS => d_v + d_r + d_a,
        }
    }

    /// Concatenates the blocks this modality uses. `a` may be `None` unless
    /// the modality is [`Modality::VCS`].
    pub fn assemble(self, v: &Matrix, r: &Matrix, a: Option<&Matrix>) -> Result<Matrix> {
        match self {
            Modality::V => Ok(v.clone()),
            Modality::VC => Matrix::hcat(&[v, r]),
            Modality::VCS => {
                let a =
                    a.ok_or_else(|| Error::InvalidArgument("V+C+S input needs semantics".into()))?;
                Matrix::hcat(&[v, r, a])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Zero gives a linear softmax classifier.
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 0,
            epochs: 30,
            batch: 128,
            lr: 1e-3,
        }
    }
}

/// Softmax classifier over an explicit class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub net: Mlp,
    pub modality: Modality,
    /// Output index → class id.
    pub classes: Vec<usize>,
}

impl Classifier {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self
            .net
            .forward(x)?
            .argmax_rows()
            .into_iter()
            .map(|k| self.classes[k])
            .collect())
    }
}

/// Trains a softmax classifier on `(x, labels)`. The class set is the sorted
/// set of labels present.
pub fn train_classifier(
    x: &Matrix,
    labels: &[usize],
    modality: Modality,
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<Classifier> {
    if x.rows() == 0 {
        return Err(Error::Empty("classifier training set"));
    }
    if labels.len() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows, {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let classes: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(
            "classifier needs at least 2 classes".into(),
        ));
    }
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = labels.iter().map(|c| index[c]).collect();
    let dims: Vec<usize> = if cfg.hidden == 0 {
        vec![x.cols(), classes.len()]
    } else {
        vec![x.cols(), cfg.hidden, classes.len()]
    };
    let mut net = Mlp::new(&dims, Activation::LeakyRelu, Activation::Identity, rng)?;
    let mut opt = Adam::new(
        &net,
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let tr = net.forward_trace(&xb)?;
            let (_, d) = ce_loss_grad(&tr.output, &yb)?;
            let (g, _) = net.backward(&tr, &d, true)?;
            opt.step(&mut net, &g.expect("requested"));
        }
    }
    if !net.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            what: "classifier".into(),
        });
    }
    Ok(Classifier {
        net,
        modality,
        classes,
    })
}

/// Synthetic features with the conditioning they were generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSet {
    pub v: Matrix,
    pub r: Matrix,
    pub a: Matrix,
    pub labels: Vec<usize>,
    /// Row of the real feature each sample was generated from (`None` for
    /// fully-noised rows).
    pub source: Vec<Option<usize>>,
    /// Diffusion step each sample started from.
    pub t: Vec<usize>,
}

impl SynthSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn concat(parts: Vec<SynthSet>, d_v: usize, d_r: usize, d_a: usize) -> Result<SynthSet> {
        let mut out = SynthSet {
            v: Matrix::zeros(0, d_v),
            r: Matrix::zeros(0, d_r),
            a: Matrix::zeros(0, d_a),
            labels: Vec::new(),
            source: Vec::new(),
            t: Vec::new(),
        };
        for p in parts {
            out.v = Matrix::vcat(&[&out.v, &p.v])?;
            out.r = Matrix::vcat(&[&out.r, &p.r])?;
            out.a = Matrix::vcat(&[&out.a, &p.a])?;
            out.labels.extend(p.labels);
            out.source.extend(p.source);
            out.t.extend(p.t);
        }
        Ok(out)
    }

    pub fn features(&self, modality: Modality) -> Result<Matrix> {
        modality.assemble(&self.v, &self.r, Some(&self.a))
    }

    /// `synthetic_id,source_test_id,t,pseudo_label` rows.
    pub fn provenance_csv(&self) -> String {
        let mut s = String::from("synthetic_id,source_test_id,t,pseudo_label\n");
        for i in 0..self.len() {
            let src = self.source[i].map_or(String::new(), |x| x.to_string());
            s.push_str(&format!("{i},{src},{},{}\n", self.t[i], self.labels[i]));
        }
        s
    }
}

fn row_block(row: &[f64], n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, row.len());
    for i in 0..n {
        m.row_mut(i).copy_from_slice(row);
    }
    m
}

/// `N_syn` samples per class from pure noise at `t = T`, with `r̃₀` drawn
/// from `R` and unit-normalised.
pub fn fngen(
    model: &TrainedModel,
    classes: &[usize],
    semantics: &Matrix,
    n_syn: usize,
    rng: &Rng,
) -> Result<SynthSet> {
    if n_syn == 0 {
        return Err(Error::InvalidArgument("N_syn must be at least 1".into()));
    }
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    let d = model.dims;
    let big_t = d.steps;
    let parts = Exec::default().map(classes.len(), |k| -> Result<SynthSet> {
        let c = classes[k];
        if c >= semantics.rows() {
            return Err(Error::MissingSemantics(c));
        }
        let mut r = rng.fork(c as u64);
        let a = row_block(semantics.row(c), n_syn);
        let r_t = r.normal_matrix(n_syn, d.d_r);
        let z_r = r.normal_matrix(n_syn, d.z_dim);
        let r0 = l2_normalize_rows(&model.represent(&a, big_t, &r_t, &z_r)?);
        let v_t = r.normal_matrix(n_syn, d.d_v);
        let z = r.normal_matrix(n_syn, d.z_dim);
        let v = model.generate(&a, &r0, big_t, &v_t, &z)?;
        Ok(SynthSet {
            v,
            r: r0,
            a,
            labels: vec![c; n_syn],
            source: vec![None; n_syn],
            t: vec![big_t; n_syn],
        })
    });
    SynthSet::concat(
        parts.into_iter().collect::<Result<_>>()?,
        d.d_v,
        d.d_r,
        d.d_a,
    )
}

/// Starting step for partial-denoise generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffGenT {
    Fixed(usize),
    Random,
}

/// Contrastive representation fed to `G` during partial-denoise generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScSource {
    /// The real `r₀` paired with the source feature.
    Real,
    /// `r̃₀` generated by `R` from noise.
    Fake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_syn: usize,
    pub diffgen_t: DiffGenT,
    pub sc_source: ScSource,
    pub tta: bool,
    pub tta_steps: usize,
    pub tta_lr: f64,
    pub tta_batch: usize,
    pub modality: Modality,
    pub classifier: ClassifierConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_syn: 200,
            diffgen_t: DiffGenT::Fixed(2),
            sc_source: ScSource::Real,
            tta: true,
            tta_steps: 200,
            tta_lr: 1e-4,
            tta_batch: 64,
            modality: Modality::VC,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.n_syn == 0 {
            return Err(Error::InvalidArgument("n_syn must be at least 1".into()));
        }
        if let DiffGenT::Fixed(t) = self.diffgen_t {
            if t > steps {
                return Err(Error::StepOutOfRange { t, max: steps });
            }
        }
        if !(self.tta_lr > 0.0) || self.tta_batch == 0 {
            return Err(Error::InvalidArgument(
                "tta_lr and tta_batch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Features of `rows` in a classifier's modality. Rows without known
/// semantics take them from `labels` (for example pseudo-labels).
pub fn modality_input(
    data: &EmbeddedSet,
    rows: &[usize],
    modality: Modality,
    labels: Option<&[usize]>,
) -> Result<Matrix> {
    let v = data.visual.features.select_rows(rows);
    let r = data.contrastive.select_rows(rows);
    let a = match (modality, labels) {
        (Modality::VCS, Some(l)) => Some(data.visual.semantics_for(l)),
        (Modality::VCS, None) => {
            return Err(Error::InvalidArgument(
                "V+C+S input needs labels for semantics".into(),
            ))
        }
        _ => None,
    };
    modality.assemble(&v, &r, a.as_ref())
}

/// Predicts labels for `rows`. A V+C+S classifier first labels the rows with
/// `aux` (a V+C classifier) to look up their semantics.
pub fn classify_rows(
    clf: &Classifier,
    aux: Option<&Classifier>,
    data: &EmbeddedSet,
    rows: &[usize],
) -> Result<Vec<usize>> {
    match clf.modality {
        Modality::VCS => {
            let aux = aux.ok_or_else(|| {
                Error::InvalidArgument("V+C+S classifier needs an auxiliary classifier".into())
            })?;
            let guess = classify_rows(aux, None, data, rows)?;
            clf.predict(&modality_input(data, rows, Modality::VCS, Some(&guess))?)
        }
        m => clf.predict(&modality_input(data, rows, m, None)?),
    }
}

/// Reconstruction loss `mean_i ‖v₀ − G(a, r₀, t, v_t, z)‖₂` and its gradient
/// with respect to `G`. `v_t` is the marginal of `v₀` under `eps`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_pass(
    model: &TrainedModel,
    v0: &Matrix,
    r0: &Matrix,
    a: &Matrix,
    t: usize,
    eps: &Matrix,
    z: &Matrix,
    want_grads: bool,
) -> Result<(f64, Option<crate::mlp::Gradients>)> {
    let n = v0.rows();
    if n == 0 {
        return Err(Error::Empty("reconstruction batch"));
    }
    let v_t = model.schedule.diffuse_marginal_with(v0, t, eps)?;
    let x = model.g_input(a, r0, t, &v_t, z)?;
    let tr = model.gens.g.forward_trace(&x)?;
    let nf = n as f64;
    let mut loss = 0.0;
    let mut up = Matrix::zeros(n, v0.cols());
    for i in 0..n {
        let e: Vec<f64> = tr
            .output
            .row(i)
            .iter()
            .zip(v0.row(i))
            .map(|(o, v)| o - v)
            .collect();
        let sq = e.iter().map(|x| x * x).sum::<f64>();
        // ε only guards the gradient; the reported loss is the exact norm
        let nrm = (sq + NORM_EPS).sqrt();
        loss += sq.sqrt() / nf;
        for (u, ei) in up.row_mut(i).iter_mut().zip(&e) {
            *u = ei / (nrm * nf);
        }
    }
    if !want_grads {
        return Ok((loss, None));
    }
    let (g, _) = model.gens.g.backward(&tr, &up, true)?;
    Ok((loss, g))
}

/// Mean unseen reconstruction loss over `rows` with pseudo-labels `labels`,
/// averaged over `t = 1..=T` with noise from `rng`.
pub fn tta_loss(
    model: &TrainedModel,
    data: &EmbeddedSet,
    rows: &[usize],
    labels: &[usize],
    rng: &Rng,
) -> Result<f64> {
    let v0 = data.visual.features.select_rows(rows);
    let r0 = data.contrastive.select_rows(rows);
    let a = data.visual.semantics_for(labels);
    let mut total = 0.0;
    let steps = model.dims.steps;
    for t in 1..=steps {
        let mut r = rng.fork(t as u64);
        let eps = r.normal_matrix(rows.len(), model.dims.d_v);
        let z = r.normal_matrix(rows.len(), model.dims.z_dim);
        total += reconstruction_pass(model, &v0, &r0, &a, t, &eps, &z, false)?.0;
    }
    Ok(total / steps as f64)
}

/// Adapts `G` on unlabeled unseen rows (`rows`, pseudo-labelled `labels`)
/// plus the seen training rows. Critics and `R` are untouched.
pub fn difftta(
    model: &TrainedModel,
    data: &EmbeddedSet,
    rows: &[usize],
    labels: &[usize],
    cfg: &GenConfig,
    rng: &Rng,
) -> Result<TrainedModel> {
    if rows.is_empty() {
        return Err(Error::Empty("test rows for adaptation"));
    }
    if rows.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows, {} pseudo-labels",
            rows.len(),
            labels.len()
        )));
    }
    let mut out = model.clone();
    if cfg.tta_steps == 0 {
        return Ok(out);
    }
    let seen = data.visual.train_rows();
    let mut opt = Adam::new(
        &out.gens.g,
        AdamConfig {
            lr: cfg.tta_lr,
            ..model.config.adam
        },
    );
    let mut r = rng.substream("tta");
    let d = model.dims;
    for step in 0..cfg.tta_steps {
        let mut grads = None;
        for (pool, pool_labels) in [(rows, Some(labels)), (&seen[..], None)] {
            if pool.is_empty() {
                continue;
            }
            let k = cfg.tta_batch.min(pool.len());
            let pick: Vec<usize> = (0..k).map(|_| r.below(pool.len())).collect();
            let idx: Vec<usize> = pick.iter().map(|&i| pool[i]).collect();
            let lab: Vec<usize> = match pool_labels {
                Some(l) => pick.iter().map(|&i| l[i]).collect(),
                None => idx.iter().map(|&i| data.visual.labels[i]).collect(),
            };
            let t = 1 + r.below(d.steps);
            let eps = r.normal_matrix(k, d.d_v);
            let z = r.normal_matrix(k, d.z_dim);
            let v0 = data.visual.features.select_rows(&idx);
            let r0 = data.contrastive.select_rows(&idx);
            let a = data.visual.semantics_for(&lab);
            let (loss, g) = reconstruction_pass(&out, &v0, &r0, &a, t, &eps, &z, true)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: step,
                    what: "adaptation loss".into(),
                });
            }
            let g = g.expect("requested");
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => crate::mlp::Gradients::add_scaled(acc, &g, 1.0),
            }
        }
        opt.step(
            &mut out.gens.g,
            &grads.expect("at least the unseen pool is nonempty"),
        );
    }
    Ok(out)
}

/// Partial-denoise generation from the unseen `rows` with pseudo-labels
/// `labels`. Each class in `classes` gets `n_syn` samples, cycling through its
/// pseudo-labelled source rows with fresh noise. Classes without any source
/// row are filled by [`fngen`].
pub fn diffgen(
    model: &TrainedModel,
    data: &EmbeddedSet,
    rows: &[usize],
    labels: &[usize],
    classes: &[usize],
    cfg: &GenConfig,
    rng: &Rng,
) -> Result<SynthSet> {
    cfg.validate(model.dims.steps)?;
    if rows.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows, {} pseudo-labels",
            rows.len(),
            labels.len()
        )));
    }
    let d = model.dims;
    let n_syn = cfg.n_syn;
    let parts = Exec::default().map(classes.len(), |k| -> Result<SynthSet> {
        let c = classes[k];
        if c >= data.visual.semantics.rows() {
            return Err(Error::MissingSemantics(c));
        }
        let mut r = rng.fork(c as u64);
        let src: Vec<usize> = rows
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(&i, _)| i)
            .collect();
        if src.is_empty() {
            return fngen(
                model,
                &[c],
                &data.visual.semantics,
                n_syn,
                &rng.substream("fill"),
            );
        }
        let source: Vec<usize> = (0..n_syn).map(|j| src[j % src.len()]).collect();
        let ts: Vec<usize> = (0..n_syn)
            .map(|_| match cfg.diffgen_t {
                DiffGenT::Fixed(t) => t,
                DiffGenT::Random => 1 + r.below(d.steps),
            })
            .collect();
        let v0 = data.visual.features.select_rows(&source);
        let a = row_block(data.visual.semantics.row(c), n_syn);
        let r0 = match cfg.sc_source {
            ScSource::Real => data.contrastive.select_rows(&source),
            ScSource::Fake => {
                let r_t = r.normal_matrix(n_syn, d.d_r);
                let z_r = r.normal_matrix(n_syn, d.z_dim);
                l2_normalize_rows(&model.represent(&a, d.steps, &r_t, &z_r)?)
            }
        };
        let eps = r.normal_matrix(n_syn, d.d_v);
        let z = r.normal_matrix(n_syn, d.z_dim);
        let mut v = v0.clone();
        for t in 1..=d.steps {
            let idx: Vec<usize> = (0..n_syn).filter(|&j| ts[j] == t).collect();
            if idx.is_empty() {
                continue;
            }
            let v_t = model.schedule.diffuse_marginal_with(
                &v0.select_rows(&idx),
                t,
                &eps.select_rows(&idx),
            )?;
            let out = model.generate(
                &a.select_rows(&idx),
                &r0.select_rows(&idx),
                t,
                &v_t,
                &z.select_rows(&idx),
            )?;
            for (o, &j) in idx.iter().enumerate() {
                v.row_mut(j).copy_from_slice(out.row(o));
            }
        }
        Ok(SynthSet {
            v,
            r: r0,
            a,
            labels: vec![c; n_syn],
            source: source.into_iter().map(Some).collect(),
            t: ts,
        })
    });
    SynthSet::concat(
        parts.into_iter().collect::<Result<_>>()?,
        d.d_v,
        d.d_r,
        d.d_a,
    )
}

/// `H = 2US / (U + S)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Mean over classes of per-class top-1 accuracy, plus the per-class values.
pub fn per_class_accuracy(truth: &[usize], pred: &[usize]) -> Result<(f64, BTreeMap<usize, f64>)> {
    if truth.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&y, &p) in truth.iter().zip(pred) {
        let e = hits.entry(y).or_default();
        e.0 += usize::from(y == p);
        e.1 += 1;
    }
    let per: BTreeMap<usize, f64> = hits
        .into_iter()
        .map(|(c, (h, n))| (c, h as f64 / n as f64))
        .collect();
    let mean = per.values().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// ZSL per-class top-1 on unseen classes.
    pub t1: f64,
    /// GZSL unseen accuracy.
    pub u: f64,
    /// GZSL seen accuracy.
    pub s: f64,
    pub h: f64,
    /// GZSL per-class accuracy keyed by class id.
    pub per_class: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// Checks that the fields are in range and that `h` matches `u`, `s`.
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| (0.0..=100.0).contains(&x);
        if !(ok(self.t1) && ok(self.u) && ok(self.s) && ok(self.h))
            || !self.per_class.values().all(|&x| ok(x))
        {
            return Err(Error::InvalidArgument("accuracy outside [0, 100]".into()));
        }
        if (harmonic_mean(self.u, self.s) - self.h).abs() > 1e-9 {
            return Err(Error::InvalidArgument("H inconsistent with U and S".into()));
        }
        Ok(())
    }
}

/// The two classifiers an evaluation needs (plus V+C auxiliaries for V+C+S).
#[derive(Debug, Clone)]
pub struct Classifiers {
    pub zsl: Classifier,
    pub gzsl: Classifier,
    pub zsl_aux: Option<Classifier>,
    pub gzsl_aux: Option<Classifier>,
}

/// Trains the ZSL classifier on `synth` and the GZSL classifier on
/// `synth` ∪ seen training rows.
pub fn train_classifiers(
    data: &EmbeddedSet,
    synth: &SynthSet,
    modality: Modality,
    cfg: &ClassifierConfig,
    rng: &Rng,
) -> Result<Classifiers> {
    let seen = data.visual.train_rows();
    let seen_labels: Vec<usize> = seen.iter().map(|&i| data.visual.labels[i]).collect();
    let fit = |m: Modality, name: &str| -> Result<(Classifier, Classifier)> {
        let xs = synth.features(m)?;
        let zsl = train_classifier(
            &xs,
            &synth.labels,
            m,
            cfg,
            &mut rng.substream(&format!("{name}-zsl")),
        )?;
        let xr = modality_input(data, &seen, m, Some(&seen_labels))?;
        let x = Matrix::vcat(&[&xr, &xs])?;
        let y: Vec<usize> = seen_labels.iter().chain(&synth.labels).copied().collect();
        let gzsl = train_classifier(&x, &y, m, cfg, &mut rng.substream(&format!("{name}-gzsl")))?;
        Ok((zsl, gzsl))
    };
    let (zsl, gzsl) = fit(modality, "main")?;
    let (zsl_aux, gzsl_aux) = if modality == Modality::VCS {
        let (a, b) = fit(Modality::VC, "aux")?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(Classifiers {
        zsl,
        gzsl,
        zsl_aux,
        gzsl_aux,
    })
}

/// ZSL T1 on unseen rows; GZSL U, S and H on unseen and seen-test rows.
pub fn evaluate(clf: &Classifiers, data: &EmbeddedSet) -> Result<EvalReport> {
    let unseen = data.visual.unseen_rows();
    let seen_test = data.visual.seen_test_rows();
    if unseen.is_empty() || seen_test.is_empty() {
        return Err(Error::Empty("unseen or seen-test evaluation split"));
    }
    let truth = |rows: &[usize]| {
        rows.iter()
            .map(|&i| data.visual.labels[i])
            .collect::<Vec<_>>()
    };
    let (yu, ys) = (truth(&unseen), truth(&seen_test));
    let (t1, _) = per_class_accuracy(
        &yu,
        &classify_rows(&clf.zsl, clf.zsl_aux.as_ref(), data, &unseen)?,
    )?;
    let (u, pu) = per_class_accuracy(
        &yu,
        &classify_rows(&clf.gzsl, clf.gzsl_aux.as_ref(), data, &unseen)?,
    )?;
    let (s, ps) = per_class_accuracy(
        &ys,
        &classify_rows(&clf.gzsl, clf.gzsl_aux.as_ref(), data, &seen_test)?,
    )?;
    let (u, s) = (100.0 * u, 100.0 * s);
    let per_class = pu
        .into_iter()
        .chain(ps)
        .map(|(c, a)| (c, 100.0 * a))
        .collect();
    let report = EvalReport {
        t1: 100.0 * t1,
        u,
        s,
        h: harmonic_mean(u, s),
        per_class,
    };
    report.validate()?;
    Ok(report)
}

/// Projects the rows of `x` onto their first two principal components
/// (power iteration with deflation on the covariance).
pub fn pca_2d(x: &Matrix, rng: &mut Rng) -> Result<Matrix> {
    if x.rows() < 2 {
        return Err(Error::Empty("projection needs at least two rows"));
    }
    let mu = x.mean_rows();
    let mut c = x.clone();
    for i in 0..c.rows() {
        for (v, m) in c.row_mut(i).iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    let mut cov = c.t_matmul(&c)?.scale(1.0 / (x.rows() - 1) as f64);
    let d = x.cols();
    let mut comps = Vec::new();
    for _ in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = cov.matmul(&Matrix::from_vec(d, 1, v.clone())?)?.into_data();
            let n = norm(&w);
            if n < 1e-300 {
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / n).collect();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lambda = n;
            if delta < 1e-12 {
                break;
            }
        }
        // orient by the largest-magnitude coordinate so the sign is stable
        let k = (0..d)
            .max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs()))
            .unwrap_or(0);
        if v[k] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] -= lambda * v[i] * v[j];
            }
        }
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(vec![0.0; d]);
    }
    let p = Matrix::from_rows(&comps)?;
    c.matmul_t(&p)
}

/// CSV rows `kind,label,pc1,pc2` for real features followed by synthetic ones.
pub fn projection_csv(
    real: &Matrix,
    real_labels: &[usize],
    synth: &SynthSet,
    rng: &mut Rng,
) -> Result<String> {
    let all = Matrix::vcat(&[real, &synth.v])?;
    let p = pca_2d(&all, rng)?;
    let mut s = String::from("kind,label,pc1,pc2\n");
    for i in 0..p.rows() {
        let (kind, label) = if i < real.rows() {
            ("real", real_labels[i])
        } else {
            ("synthetic", synth.labels[i - real.rows()])
        };
        s.push_str(&format!("{kind},{label},{:e},{:e}\n", p[(i, 0)], p[(i, 1)]));
    }
    Ok(s)
}
