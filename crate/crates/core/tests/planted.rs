//! Experiments on planted models whose parameters are known.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ugt_core::corpus::{write_synthetic_corpus, CorpusOptions};
use ugt_core::eval::evaluate;
use ugt_core::finetune::pseudo_label;
use ugt_core::head::{
    assign_mixtures, classify_all, fit_background_model, fit_spatial_coefficients,
};
use ugt_core::io::load_manifest;
use ugt_core::pipeline::{source_stage, transitional_stage, PipelineConfig};
use ugt_core::synth::{
    make_domain_pair, match_kernels, occlude_maps, sample_dataset, sample_feature_map,
    sample_mixture, sample_vmf, DomainPairSpec, Occlusion, OcclusionLevel,
};
use ugt_core::transition::adapt_dictionary;
use ugt_core::vmf::{em_fit_dictionary, likelihood_map};
use ugt_core::{
    AdaptConfig, EmConfig, FeatureMap, FeatureSet, GenerativeModel, PsiMode, SpatialCoefficients,
    VmfDictionary,
};

fn accuracy(
    maps: &[FeatureMap],
    labels: &[u32],
    model: &GenerativeModel,
    use_occlusion: bool,
) -> f64 {
    let p = classify_all(maps, model, use_occlusion).unwrap();
    p.iter().zip(labels).filter(|(c, &y)| c.label == y).count() as f64 / labels.len() as f64
}

fn planted_dictionary(
    k: usize,
    d: usize,
    sigma: f64,
    weights: Vec<f64>,
    seed: u64,
) -> VmfDictionary {
    let spec = DomainPairSpec {
        kernels: k,
        dim: d,
        sigma,
        seed,
        maps_per_class_source: 1,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (_, _, truth) = make_domain_pair(&spec).unwrap();
    VmfDictionary::new(
        d,
        sigma,
        truth.source.dictionary.kernels().to_vec(),
        weights,
    )
    .unwrap()
}

#[test]
fn em_recovers_planted_mixture() {
    let planted = planted_dictionary(3, 8, 30.0, vec![0.2, 0.3, 0.5], 11);
    let rows = sample_mixture(&planted, 5000, 1);
    let features = FeatureSet::from_rows(8, &rows).unwrap();
    let (fit, log) = em_fit_dictionary(&features, 3, 30.0, &EmConfig::default()).unwrap();
    assert!(log.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    for (i, (j, cos)) in match_kernels(&planted, &fit)
        .unwrap()
        .into_iter()
        .enumerate()
    {
        assert!(cos >= 0.99, "kernel {i}: {cos}");
        assert!((planted.weights()[i] - fit.weights()[j]).abs() <= 0.05);
    }
}

#[test]
fn background_model_recovers_planted_mixture() {
    let planted = planted_dictionary(5, 16, 30.0, vec![0.2; 5], 12);
    let rows = sample_mixture(&planted, 4000, 2);
    let q = fit_background_model(
        &FeatureSet::from_rows(16, &rows).unwrap(),
        5,
        30.0,
        &EmConfig::default(),
    )
    .unwrap();
    assert!(match_kernels(&planted, &q)
        .unwrap()
        .iter()
        .all(|m| m.1 >= 0.99));
}

#[test]
fn uniform_background_has_zero_mean_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..10_000)
        .map(|_| sample_vmf(&[1.0; 16].map(|v| v / 4.0), 0.0, &mut rng))
        .collect();
    let q = fit_background_model(
        &FeatureSet::from_rows(16, &rows[..5000]).unwrap(),
        1,
        30.0,
        &EmConfig::default(),
    )
    .unwrap();
    let mean = rows[5000..]
        .iter()
        .map(|f| q.log_mixture_density(f))
        .sum::<f64>()
        / 5000.0;
    assert!(mean.abs() <= 30.0 * 3.0 / 4.0, "{mean}");
}

#[test]
fn kernel_frequencies_match_alpha() {
    let spec = DomainPairSpec {
        kernels: 4,
        dim: 8,
        height: 2,
        width: 2,
        mixtures: 1,
        n_classes: 1,
        template_concentration: 1.0,
        maps_per_class_source: 1,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (_, _, truth) = make_domain_pair(&spec).unwrap();
    let model = &truth.source;
    let draws = 10_000;
    let mut counts = [0usize; 4 * 4];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..draws {
        let (_, record) = sample_feature_map(model, 0, 0, &mut rng).unwrap();
        for (a, &k) in record.kernels.iter().enumerate() {
            counts[a * 4 + k] += 1;
        }
    }
    for a in 0..4 {
        for k in 0..4 {
            let p = model.spatial.alpha(0, 0, a)[k];
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = counts[a * 4 + k] as f64 / draws as f64;
            assert!(
                (freq - p).abs() <= 3.0 * se + 1e-12,
                "position {a} kernel {k}: {freq} vs {p}"
            );
        }
    }
}

#[test]
fn mixture_grouping_follows_templates() {
    let spec = DomainPairSpec {
        n_classes: 1,
        maps_per_class_source: 200,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (source, _, truth) = make_domain_pair(&spec).unwrap();
    let maps: Vec<_> = source
        .maps
        .iter()
        .map(|fm| likelihood_map(fm, &truth.source.dictionary).unwrap())
        .collect();
    let groups = assign_mixtures(&maps, 2, 0).unwrap();
    let same = groups
        .iter()
        .zip(&source.records)
        .filter(|(g, r)| **g == r.mixture)
        .count();
    let agreement = same.max(groups.len() - same) as f64 / groups.len() as f64;
    assert!(agreement >= 0.95, "{agreement}");
}

/// Mean per-position total-variation distance between fitted and planted α,
/// with mixtures matched per class by the better of the two pairings.
fn mean_tv(fit: &SpatialCoefficients, planted: &SpatialCoefficients) -> f64 {
    let (k, n_pos) = (planted.kernels(), planted.positions());
    let tv = |ci: usize, mf: usize, mp: usize| -> f64 {
        (0..n_pos)
            .map(|a| {
                let x = fit.alpha(ci, mf, a);
                let y = planted.alpha(ci, mp, a);
                0.5 * (0..k).map(|j| (x[j] - y[j]).abs()).sum::<f64>()
            })
            .sum::<f64>()
            / n_pos as f64
    };
    let classes = planted.classes().len();
    (0..classes)
        .map(|ci| {
            let straight = tv(ci, 0, 0) + tv(ci, 1, 1);
            let swapped = tv(ci, 0, 1) + tv(ci, 1, 0);
            straight.min(swapped) / 2.0
        })
        .sum::<f64>()
        / classes as f64
}

#[test]
fn spatial_fit_recovers_planted_alpha() {
    let spec = DomainPairSpec {
        maps_per_class_source: 600,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (source, _, truth) = make_domain_pair(&spec).unwrap();
    let fit =
        fit_spatial_coefficients(&source.maps, &source.labels, &truth.source.dictionary, 2, 0)
            .unwrap();
    let tv = mean_tv(&fit, &truth.source.spatial);
    assert!(tv <= 0.1, "mean total variation {tv}");
}

#[test]
fn planted_model_classifies_its_samples() {
    let spec = DomainPairSpec {
        maps_per_class_source: 1,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (_, _, truth) = make_domain_pair(&spec).unwrap();
    let test = sample_dataset(&truth.source, 67, 9, 0).unwrap();
    assert!(accuracy(&test.maps, &test.labels, &truth.source, false) >= 0.95);
}

#[test]
fn occlusion_masks_are_recovered_at_l2() {
    let spec = DomainPairSpec {
        maps_per_class_source: 1,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (_, _, truth) = make_domain_pair(&spec).unwrap();
    let test = sample_dataset(&truth.source, 50, 10, 0).unwrap();
    let q = &truth.source.occlusion.as_ref().unwrap().background;
    let occluded = occlude_maps(&test.maps, Occlusion::Level(OcclusionLevel::L2), q, 3).unwrap();
    let iou: f64 = occluded
        .iter()
        .zip(&test.labels)
        .map(|((fm, mask), &y)| {
            let (_, found) = ugt_core::head::occluded_log_likelihood(fm, &truth.source, y).unwrap();
            found.iou(mask)
        })
        .sum::<f64>()
        / occluded.len() as f64;
    assert!(iou >= 0.8, "{iou}");
}

#[test]
fn adaptation_moves_only_shifted_kernels() {
    let spec = DomainPairSpec {
        kernels: 8,
        maps_per_class_source: 1,
        maps_per_class_target: 200,
        ..DomainPairSpec::default()
    };
    let (_, target, truth) = make_domain_pair(&spec).unwrap();
    let features = FeatureSet::from_maps(&target.maps).unwrap();
    let cfg = AdaptConfig {
        psi_mode: PsiMode::DataDependent,
        ..AdaptConfig::default()
    };
    let (adapted, report) = adapt_dictionary(&truth.source.dictionary, &features, &cfg).unwrap();
    for &k in &truth.shared {
        assert!(
            report.cosine[k] >= 0.98,
            "shared kernel {k}: {}",
            report.cosine[k]
        );
    }
    let matched = match_kernels(&truth.target.dictionary, &adapted).unwrap();
    for k in truth.shifted() {
        assert!(matched[k].1 >= 0.97, "shifted kernel {k}: {}", matched[k].1);
        assert!(report.cosine[k] < 0.9);
    }
    // Shared kernels sit in the top histogram bin, shifted ones well below it.
    let top = *report.histogram.last().unwrap();
    assert!(top >= truth.shared.len());
    assert!(report.histogram.iter().sum::<usize>() == 8);
}

#[test]
fn concentrated_planted_model_is_perfect() {
    let spec = DomainPairSpec {
        sigma: 1e6,
        maps_per_class_source: 1,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (_, _, truth) = make_domain_pair(&spec).unwrap();
    let test = sample_dataset(&truth.source, 30, 12, 0).unwrap();
    assert_eq!(
        accuracy(&test.maps, &test.labels, &truth.source, false),
        1.0
    );
}

#[test]
fn confident_pseudo_labels_are_at_least_as_accurate() {
    let spec = DomainPairSpec {
        class_specificity: 0.3,
        maps_per_class_source: 100,
        maps_per_class_target: 100,
        ..DomainPairSpec::default()
    };
    let (source, target, _) = make_domain_pair(&spec).unwrap();
    let cfg = PipelineConfig {
        kernels: 24,
        mixtures: 2,
        ..PipelineConfig::default()
    };
    let (model, _) = source_stage(&source.maps, &source.labels, &cfg, None).unwrap();
    let (model, _) = transitional_stage(
        &model.dictionary,
        &source.maps,
        &source.labels,
        &target.maps,
        &cfg,
        None,
    )
    .unwrap();
    let overall = accuracy(&target.maps, &target.labels, &model, false);
    let pseudo = pseudo_label(&target.maps, &model, 0.8).unwrap();
    assert!(!pseudo.is_empty());
    let retained = pseudo
        .entries
        .iter()
        .filter(|e| e.label == target.labels[e.id])
        .count() as f64
        / pseudo.len() as f64;
    assert!(
        retained >= overall,
        "retained {retained} vs overall {overall}"
    );
}

#[test]
fn occlusion_hurts_less_with_occlusion_aware_inference() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DomainPairSpec {
        class_specificity: 0.3,
        maps_per_class_source: 1,
        maps_per_class_target: 1,
        ..DomainPairSpec::default()
    };
    let (paths, truth) = write_synthetic_corpus(
        dir.path(),
        &spec,
        &CorpusOptions {
            eval_per_class: 150,
            background_samples: 100,
        },
    )
    .unwrap();
    let manifest = load_manifest(&paths.eval_manifest).unwrap();
    let plain = evaluate(&manifest, &truth.target, false).unwrap();
    let aware = evaluate(&manifest, &truth.target, true).unwrap();
    let acc = |r: &ugt_core::EvalReport, l| r.level(l).unwrap().overall.accuracy;
    let levels = OcclusionLevel::ALL;
    for w in levels.windows(2) {
        assert!(
            acc(&plain, w[1]) < acc(&plain, w[0]),
            "{} -> {}",
            w[0],
            w[1]
        );
    }
    for l in [OcclusionLevel::L2, OcclusionLevel::L3] {
        let drop_plain = acc(&plain, OcclusionLevel::L0) - acc(&plain, l);
        let drop_aware = acc(&aware, OcclusionLevel::L0) - acc(&aware, l);
        assert!(drop_aware < drop_plain, "{l}: {drop_aware} vs {drop_plain}");
    }
}
