//! End-to-end runs: configuration, data preparation, training and the three
//! inference paths.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::{gen_synthetic, subsample_train, FeatureSet, SyntheticSpec};
use crate::diffusion::{DiffusionSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::gan::{self, EpochTrace, TrainConfig, TrainedModel};
use crate::genstage::{self, classify_rows, EvalReport, GenConfig, SynthSet};
use crate::representations::{train_encoders, EmbeddedSet, EncoderConfig, EncoderPair};
use crate::rng::Rng;
use crate::theory::SuiteConfig;

/// Where the labelled features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Binary feature file.
    File(PathBuf),
    Csv {
        features: PathBuf,
        semantics: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    /// Fraction of each seen class's training rows kept.
    pub ratio: f64,
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub theory: SuiteConfig,
    pub out_dir: PathBuf,
    /// `N_syn` values for the sweep; empty disables it.
    pub n_syn_sweep: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            ratio: 1.0,
            schedule: ScheduleConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            gen: GenConfig::default(),
            theory: SuiteConfig::default(),
            out_dir: PathBuf::from("out"),
            n_syn_sweep: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<DiffusionSchedule> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        let sched = self.schedule.build()?;
        self.train.validate()?;
        self.gen.validate(sched.steps())?;
        if self.n_syn_sweep.contains(&0) {
            return Err(Error::InvalidArgument(
                "sweep values must be at least 1".into(),
            ));
        }
        Ok(sched)
    }

    pub fn root_rng(&self) -> Rng {
        Rng::new(self.seed)
    }

    /// `N_syn` scaled by the kept fraction of training data, at least 1.
    pub fn scaled_n_syn(&self, n: usize) -> usize {
        ((n as f64 * self.ratio).round() as usize).max(1)
    }
}

/// Loads or generates the feature set and applies the subsampling protocol.
pub fn load_data(cfg: &RunConfig) -> Result<FeatureSet> {
    let fs = match &cfg.data {
        DataSource::Synthetic(spec) => gen_synthetic(spec)?,
        DataSource::File(p) => FeatureSet::load(p)?,
        DataSource::Csv {
            features,
            semantics,
        } => FeatureSet::load_csv(features, semantics)?,
    };
    if cfg.ratio == 1.0 {
        return Ok(fs);
    }
    subsample_train(
        &fs,
        cfg.ratio,
        &mut cfg.root_rng().substream("data").substream("subsample"),
    )
}

pub fn fit_encoders(cfg: &RunConfig, fs: &FeatureSet) -> Result<EncoderPair> {
    train_encoders(
        fs,
        &cfg.encoder,
        &mut cfg.root_rng().substream("train").substream("encoders"),
    )
}

/// Encoders then the adversarial stage.
pub fn run_training(cfg: &RunConfig) -> Result<(Checkpoint, Vec<EpochTrace>, EmbeddedSet)> {
    let sched = cfg.validate()?;
    let fs = load_data(cfg)?;
    let encoders = fit_encoders(cfg, &fs)?;
    let data = encoders.embed(&fs)?;
    let (model, trace) = gan::train(
        &data,
        &sched,
        &cfg.train,
        &cfg.root_rng().substream("train").substream("gan"),
    )?;
    Ok((Checkpoint { model, encoders }, trace, data))
}

/// Embeds the configured data with a checkpoint's encoders, checking widths.
pub fn embed_for(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<EmbeddedSet> {
    let fs = load_data(cfg)?;
    if fs.feature_dim() != ckpt.encoders.f_ce.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} input features, checkpoint expects {}",
            fs.feature_dim(),
            ckpt.encoders.f_ce.input_dim()
        )));
    }
    if fs.semantic_dim() != ckpt.model.dims.d_a {
        return Err(Error::DimensionMismatch(format!(
            "data has {}-dim semantics, checkpoint expects {}",
            fs.semantic_dim(),
            ckpt.model.dims.d_a
        )));
    }
    ckpt.encoders.embed(&fs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fngen,
    Diffgen,
}

/// Pseudo-labels of the unseen rows from a classifier trained on
/// fully-noised samples.
pub fn pseudo_label(
    cfg: &RunConfig,
    model: &TrainedModel,
    data: &EmbeddedSet,
    gen_rng: &Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let unseen_classes = data.visual.unseen_classes();
    let n_syn = cfg.scaled_n_syn(cfg.gen.n_syn);
    let synth = genstage::fngen(
        model,
        &unseen_classes,
        &data.visual.semantics,
        n_syn,
        &gen_rng.substream("pre-fngen"),
    )?;
    let rows = data.visual.unseen_rows();
    let aux_rng = gen_rng.substream("pre-classifier");
    let clf = genstage::train_classifier(
        &synth.features(cfg.gen.modality)?,
        &synth.labels,
        cfg.gen.modality,
        &cfg.gen.classifier,
        &mut aux_rng.substream("main"),
    )?;
    let aux = if cfg.gen.modality == genstage::Modality::VCS {
        let m = genstage::Modality::VC;
        Some(genstage::train_classifier(
            &synth.features(m)?,
            &synth.labels,
            m,
            &cfg.gen.classifier,
            &mut aux_rng.substream("aux"),
        )?)
    } else {
        None
    };
    let labels = classify_rows(&clf, aux.as_ref(), data, &rows)?;
    Ok((rows, labels))
}

/// Test-time adaptation of `G` on the pseudo-labelled unseen rows.
pub fn adapt(cfg: &RunConfig, model: &TrainedModel, data: &EmbeddedSet) -> Result<TrainedModel> {
    let gen_rng = cfg.root_rng().substream("gen");
    let (rows, labels) = pseudo_label(cfg, model, data, &gen_rng)?;
    genstage::difftta(model, data, &rows, &labels, &cfg.gen, &gen_rng)
}

/// Synthetic unseen features from one inference path. `tta` only applies to
/// [`Method::Diffgen`].
pub fn synthesize(
    cfg: &RunConfig,
    model: &TrainedModel,
    data: &EmbeddedSet,
    method: Method,
    tta: bool,
    n_syn: usize,
) -> Result<SynthSet> {
    let gen_rng = cfg.root_rng().substream("gen");
    let unseen = data.visual.unseen_classes();
    let n_syn = cfg.scaled_n_syn(n_syn);
    match method {
        Method::Fngen => genstage::fngen(
            model,
            &unseen,
            &data.visual.semantics,
            n_syn,
            &gen_rng.substream("fngen"),
        ),
        Method::Diffgen => {
            let (rows, labels) = pseudo_label(cfg, model, data, &gen_rng)?;
            let adapted;
            let g = if tta {
                adapted = genstage::difftta(model, data, &rows, &labels, &cfg.gen, &gen_rng)?;
                &adapted
            } else {
                model
            };
            let gen_cfg = GenConfig {
                n_syn,
                ..cfg.gen.clone()
            };
            genstage::diffgen(
                g,
                data,
                &rows,
                &labels,
                &unseen,
                &gen_cfg,
                &gen_rng.substream("diffgen"),
            )
        }
    }
}

/// Trains the ZSL and GZSL classifiers on `synth` and evaluates them.
pub fn evaluate_synth(cfg: &RunConfig, data: &EmbeddedSet, synth: &SynthSet) -> Result<EvalReport> {
    let rng = cfg.root_rng().substream("gen").substream("classifiers");
    let clf =
        genstage::train_classifiers(data, synth, cfg.gen.modality, &cfg.gen.classifier, &rng)?;
    genstage::evaluate(&clf, data)
}

pub fn run_inference(
    cfg: &RunConfig,
    model: &TrainedModel,
    data: &EmbeddedSet,
    method: Method,
    tta: bool,
) -> Result<(EvalReport, SynthSet)> {
    let synth = synthesize(cfg, model, data, method, tta, cfg.gen.n_syn)?;
    Ok((evaluate_synth(cfg, data, &synth)?, synth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_syn: usize,
    pub t1: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

/// One evaluation per requested `N_syn`.
pub fn sweep(
    cfg: &RunConfig,
    model: &TrainedModel,
    data: &EmbeddedSet,
    method: Method,
    tta: bool,
) -> Result<Vec<SweepRow>> {
    cfg.n_syn_sweep
        .iter()
        .map(|&n| {
            let synth = synthesize(cfg, model, data, method, tta, n)?;
            let r = evaluate_synth(cfg, data, &synth)?;
            Ok(SweepRow {
                n_syn: n,
                t1: r.t1,
                u: r.u,
                s: r.s,
                h: r.h,
            })
        })
        .collect()
}
