//! Generating stage: counts, exact cases, provenance and evaluation oracles.

mod common;

use std::collections::BTreeSet;

use common::*;
use diffzsl::datasets::{gen_synthetic, SyntheticSpec};
use diffzsl::diffusion::ScheduleConfig;
use diffzsl::gan::{ModelDims, TrainedModel};
use diffzsl::genstage::*;
use diffzsl::mlp::Layer;
use diffzsl::{Activation, Matrix, Mlp, Rng};

fn model_for(data: &diffzsl::representations::EmbeddedSet, seed: u64) -> TrainedModel {
    let dims = ModelDims {
        d_v: data.d_v(),
        d_r: data.d_r(),
        d_a: data.d_a(),
        ..small_dims()
    };
    small_model(seed, small_config(), dims)
}

#[test]
fn fngen_counts_and_labels() {
    let data = small_embedded(10);
    let model = model_for(&data, 1);
    let classes = data.visual.unseen_classes();
    let s = fngen(&model, &classes, &data.visual.semantics, 7, &Rng::new(2)).unwrap();
    assert_eq!(s.len(), 7 * classes.len());
    for &c in &classes {
        assert_eq!(s.labels.iter().filter(|&&l| l == c).count(), 7);
    }
    assert_eq!(
        s.labels.iter().copied().collect::<BTreeSet<_>>(),
        classes.iter().copied().collect()
    );
    assert!(s.source.iter().all(Option::is_none));
    assert!(s.t.iter().all(|&t| t == model.dims.steps));
    for row in s.r.iter_rows() {
        assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(fngen(&model, &classes, &data.visual.semantics, 0, &Rng::new(2)).is_err());
    assert!(fngen(&model, &[], &data.visual.semantics, 3, &Rng::new(2)).is_err());
    assert!(fngen(&model, &[99], &data.visual.semantics, 3, &Rng::new(2)).is_err());
    let again = fngen(&model, &classes, &data.visual.semantics, 7, &Rng::new(2)).unwrap();
    assert_eq!(s, again);
}

fn pseudo(data: &diffzsl::representations::EmbeddedSet) -> (Vec<usize>, Vec<usize>) {
    let rows = data.visual.unseen_rows();
    // deliberately imperfect labels: every fifth row is relabelled
    let classes = data.visual.unseen_classes();
    let labels = rows
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if k % 5 == 0 {
                classes[(classes
                    .iter()
                    .position(|&c| c == data.visual.labels[i])
                    .unwrap()
                    + 1)
                    % classes.len()]
            } else {
                data.visual.labels[i]
            }
        })
        .collect();
    (rows, labels)
}

#[test]
fn diffgen_at_zero_copies_sources() {
    let data = small_embedded(11);
    let model = model_for(&data, 3);
    let (rows, labels) = pseudo(&data);
    let cfg = GenConfig {
        n_syn: 30,
        diffgen_t: DiffGenT::Fixed(0),
        ..GenConfig::default()
    };
    let s = diffgen(
        &model,
        &data,
        &rows,
        &labels,
        &data.visual.unseen_classes(),
        &cfg,
        &Rng::new(4),
    )
    .unwrap();
    for i in 0..s.len() {
        let src = s.source[i].unwrap();
        assert_eq!(s.v.row(i), data.visual.features.row(src));
        assert_eq!(s.r.row(i), data.contrastive.row(src));
        assert_eq!(s.t[i], 0);
    }
}

#[test]
fn diffgen_provenance_is_total_and_consistent() {
    let data = small_embedded(12);
    let model = model_for(&data, 5);
    let (rows, labels) = pseudo(&data);
    for t in [DiffGenT::Fixed(1), DiffGenT::Fixed(4), DiffGenT::Random] {
        for sc in [ScSource::Real, ScSource::Fake] {
            let cfg = GenConfig {
                n_syn: 25,
                diffgen_t: t,
                sc_source: sc,
                ..GenConfig::default()
            };
            let s = diffgen(
                &model,
                &data,
                &rows,
                &labels,
                &data.visual.unseen_classes(),
                &cfg,
                &Rng::new(6),
            )
            .unwrap();
            assert_eq!(s.len(), 25 * data.visual.unseen_classes().len());
            for i in 0..s.len() {
                let src = s.source[i].expect("every DiffGen row has a source");
                let k = rows
                    .iter()
                    .position(|&r| r == src)
                    .expect("source is a test row");
                assert_eq!(labels[k], s.labels[i]);
                assert!((1..=4).contains(&s.t[i]));
            }
            let csv = s.provenance_csv();
            assert_eq!(csv.lines().count(), s.len() + 1);
        }
    }
}

#[test]
fn diffgen_fills_classes_without_sources() {
    let data = small_embedded(13);
    let model = model_for(&data, 7);
    let classes = data.visual.unseen_classes();
    let rows = data.visual.unseen_rows();
    let labels = vec![classes[0]; rows.len()];
    let cfg = GenConfig {
        n_syn: 9,
        ..GenConfig::default()
    };
    let s = diffgen(&model, &data, &rows, &labels, &classes, &cfg, &Rng::new(8)).unwrap();
    for i in 0..s.len() {
        assert_eq!(s.source[i].is_some(), s.labels[i] == classes[0]);
    }
}

#[test]
fn fully_diffused_input_forgets_the_source() {
    let sched = ScheduleConfig::default().build().unwrap();
    let n = 4000;
    let mut rng = Rng::new(14);
    let v0 = rng.normal_matrix(n, 6);
    let vt = sched
        .diffuse_marginal(&v0, sched.steps(), &mut rng)
        .unwrap();
    for j in 0..6 {
        let (x, y): (Vec<f64>, Vec<f64>) = (0..n).map(|i| (v0[(i, j)], vt[(i, j)])).unzip();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let (mx, my) = (mean(&x), mean(&y));
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
        let sy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
        let corr = cov / (sx * sy);
        assert!(
            corr.abs() < 3.0 / (n as f64).sqrt(),
            "coordinate {j}: {corr}"
        );
    }
}

#[test]
fn zero_step_adaptation_is_identity() {
    let data = small_embedded(15);
    let model = model_for(&data, 9);
    let (rows, labels) = pseudo(&data);
    let cfg = GenConfig {
        tta_steps: 0,
        ..GenConfig::default()
    };
    assert_eq!(
        difftta(&model, &data, &rows, &labels, &cfg, &Rng::new(1)).unwrap(),
        model
    );
    assert!(difftta(&model, &data, &[], &[], &cfg, &Rng::new(1)).is_err());
    let cfg = GenConfig {
        tta_steps: 3,
        tta_batch: 8,
        ..GenConfig::default()
    };
    let adapted = difftta(&model, &data, &rows, &labels, &cfg, &Rng::new(1)).unwrap();
    assert_ne!(adapted.gens.g, model.gens.g);
    assert_eq!(adapted.gens.r, model.gens.r);
    assert_eq!(adapted.critics, model.critics);
}

#[test]
fn reconstruction_loss_vanishes_for_a_perfect_generator() {
    let data = small_embedded(16);
    let mut model = model_for(&data, 11);
    let d = model.dims;
    let t = 2;
    let off = d.d_a + d.d_r + d.t_width();
    let mut w = Matrix::zeros(d.g_in(), d.d_v);
    for j in 0..d.d_v {
        w[(off + j, j)] = 1.0 / model.schedule.alpha_bar(t).sqrt();
    }
    model.gens.g = Mlp::from_layers(vec![Layer {
        weight: w,
        bias: vec![0.0; d.d_v],
        activation: Activation::Identity,
    }])
    .unwrap();
    let rows = data.visual.unseen_rows();
    let b = data.batch(&rows);
    let eps = Matrix::zeros(rows.len(), d.d_v);
    let z = Rng::new(3).normal_matrix(rows.len(), d.z_dim);
    let (loss, g) = reconstruction_pass(&model, &b.v0, &b.r0, &b.a, t, &eps, &z, true).unwrap();
    assert!(loss < 1e-12, "{loss}");
    assert!(g.unwrap().is_finite());
}

fn nearest_mean_predict(train: &Matrix, y: &[usize], x: &Matrix) -> Vec<usize> {
    let classes: BTreeSet<usize> = y.iter().copied().collect();
    let means: Vec<(usize, Vec<f64>)> = classes
        .iter()
        .map(|&c| {
            (
                c,
                train
                    .select_rows(&(0..y.len()).filter(|&i| y[i] == c).collect::<Vec<_>>())
                    .mean_rows(),
            )
        })
        .collect();
    x.iter_rows()
        .map(|r| {
            means
                .iter()
                .min_by(|a, b| {
                    let d = |m: &[f64]| r.iter().zip(m).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                    d(&a.1).total_cmp(&d(&b.1))
                })
                .unwrap()
                .0
        })
        .collect()
}

#[test]
fn classifier_matches_nearest_mean_on_clean_clusters() {
    let fs = gen_synthetic(&SyntheticSpec {
        cluster_spread: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let rows = fs.train_rows();
    let x = fs.features.select_rows(&rows);
    let y: Vec<usize> = rows.iter().map(|&i| fs.labels[i]).collect();
    let clf = train_classifier(
        &x,
        &y,
        Modality::V,
        &ClassifierConfig::default(),
        &mut Rng::new(17),
    )
    .unwrap();
    let (acc, _) = per_class_accuracy(&y, &clf.predict(&x).unwrap()).unwrap();
    let (base, _) = per_class_accuracy(&y, &nearest_mean_predict(&x, &y, &x)).unwrap();
    assert!(base > 0.99);
    assert!((acc - base).abs() <= 0.10, "{acc} vs {base}");
    assert!(train_classifier(
        &x,
        &vec![0; y.len()],
        Modality::V,
        &ClassifierConfig::default(),
        &mut Rng::new(1)
    )
    .is_err());
}

#[test]
fn per_class_accuracy_matches_brute_force() {
    let mut rng = Rng::new(18);
    for _ in 0..50 {
        let n = 5 + rng.below(40);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let (mean, per) = per_class_accuracy(&truth, &pred).unwrap();
        let present: BTreeSet<usize> = truth.iter().copied().collect();
        let mut total = 0.0;
        for &c in &present {
            let idx: Vec<usize> = (0..n).filter(|&i| truth[i] == c).collect();
            let acc = idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64;
            assert_eq!(per[&c], acc);
            total += acc;
        }
        assert!((mean - total / present.len() as f64).abs() < 1e-15);
    }
}

#[test]
fn harmonic_mean_reference_rows() {
    for (u, s, h) in [(90.7, 93.9, 92.3), (84.4, 86.4, 85.4), (73.4, 66.2, 69.6)] {
        assert!((harmonic_mean(u, s) - h).abs() <= 0.05);
    }
    assert_eq!(harmonic_mean(42.0, 42.0), 42.0);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
}

#[test]
fn evaluation_report_is_consistent() {
    let data = small_embedded(19);
    let model = model_for(&data, 13);
    let synth = fngen(
        &model,
        &data.visual.unseen_classes(),
        &data.visual.semantics,
        20,
        &Rng::new(1),
    )
    .unwrap();
    for m in [Modality::V, Modality::VC, Modality::VCS] {
        let clf = train_classifiers(
            &data,
            &synth,
            m,
            &ClassifierConfig {
                epochs: 3,
                ..ClassifierConfig::default()
            },
            &Rng::new(2),
        )
        .unwrap();
        let r = evaluate(&clf, &data).unwrap();
        r.validate().unwrap();
        assert_eq!(r.per_class.len(), data.visual.n_classes());
        assert_eq!(
            clf.zsl.net.input_dim(),
            m.input_dim(data.d_v(), data.d_r(), data.d_a())
        );
    }
}

#[test]
fn projection_has_one_row_per_point() {
    let data = small_embedded(20);
    let model = model_for(&data, 15);
    let synth = fngen(
        &model,
        &data.visual.unseen_classes(),
        &data.visual.semantics,
        4,
        &Rng::new(1),
    )
    .unwrap();
    let rows = data.visual.unseen_rows();
    let real = data.visual.features.select_rows(&rows);
    let labels: Vec<usize> = rows.iter().map(|&i| data.visual.labels[i]).collect();
    let csv = projection_csv(&real, &labels, &synth, &mut Rng::new(2)).unwrap();
    assert_eq!(csv.lines().count(), 1 + rows.len() + synth.len());
}
