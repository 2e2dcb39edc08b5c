use proptest::prelude::*;

use super::*;
use crate::colorlab::ciede2000;
use crate::lea::AttentionPath;

fn tiny_synth() -> SynthParams {
    SynthParams {
        n_pos: 10,
        n_neg: 20,
        extent: 32,
        ..SynthParams::default()
    }
}

fn tiny_config(variants: Vec<Variant>) -> ExperimentConfig {
    ExperimentConfig {
        source: DataSource::Synthetic(tiny_synth()),
        variants,
        folds: 2,
        seeds: vec![3],
        scale: 1.0 / 16.0,
        extent: 32,
        train: TrainConfig {
            epochs: 2,
            batch: 4,
            ..TrainConfig::default()
        },
        colorizer: ColorizerConfig {
            extent: 32,
            levels: 3,
            epochs: 1,
            batch: 4,
            ..ColorizerConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
    }
    assert_eq!("caan_resnet".parse::<Variant>().unwrap(), Variant::Caan(CaanVariant::ResnetBased));
    assert_eq!("four-channel-input".parse::<Variant>().unwrap(), Variant::FourChannelInput);
    assert!("resnet".parse::<Variant>().is_err());
}

#[test]
fn variant_inputs() {
    let x = Tensor::from_fn(&[2, 2, 3], |i| i as f32 / 12.0);
    let m = Tensor::from_fn(&[2, 2, 1], |i| i as f32 / 4.0);
    assert_eq!(Variant::Baseline.input(&x, &m), x);
    assert_eq!(Variant::AnomalyMapInput.input(&x, &m), m);
    let four = Variant::FourChannelInput.input(&x, &m);
    assert_eq!(four.shape(), &[2, 2, 4]);
    assert_eq!(&four.data()[4..8], &[x.data()[3], x.data()[4], x.data()[5], m.data()[1]]);
    let att = Variant::AttentionedInput.input(&x, &m);
    let a = 1.0 + 1.0 / (1.0 + (-0.25f32).exp());
    assert!((att.data()[4] - x.data()[4] * a).abs() < 1e-7);
    assert_eq!(Variant::AttentionedInput.input(&x, &Tensor::full(&[2, 2, 1], -1e30)), x);
}

#[test]
fn ratio_arithmetic() {
    assert_eq!(positives_for_ratio(0.33, 152), 75);
    assert_eq!(positives_for_ratio(0.25, 152), 51);
    assert_eq!(positives_for_ratio(0.124, 152), 22);
    assert_eq!(positives_for_ratio(0.06, 152), 10);
    let labels: Vec<u8> = (0..80).map(|i| (i < 30) as u8).collect();
    let keep = subsample_to_ratio(&labels, 0.2, 5, 1).unwrap();
    assert_eq!(keep.iter().filter(|&&i| labels[i] == 1).count(), 13);
    assert_eq!(keep.iter().filter(|&&i| labels[i] == 0).count(), 50);
    assert_eq!(keep, subsample_to_ratio(&labels, 0.2, 5, 1).unwrap());
    assert!(subsample_to_ratio(&labels, 0.5, 5, 1).is_err());
    assert!(subsample_to_ratio(&labels, 0.05, 5, 1).is_err());
    assert!(subsample_to_ratio(&labels, 1.0, 5, 1).is_err());
}

#[test]
fn f1_examples() {
    let labels = [1, 1, 0, 0];
    assert_eq!(f1(&[0.9, 0.8, 0.1, 0.2], &labels, 0.5).unwrap(), 1.0);
    assert_eq!(f1(&[0.1, 0.1, 0.1, 0.1], &labels, 0.5).unwrap(), 0.0);
    assert_eq!(f1(&[0.9, 0.1, 0.9, 0.1], &labels, 0.5).unwrap(), 0.5);
    assert_eq!(f1(&[0.5, 0.4, 0.0, 0.0], &labels, 0.5).unwrap(), 2.0 / 3.0);
    assert!(f1(&[], &[], 0.5).is_err());
    assert!(f1(&[0.1], &labels, 0.5).is_err());
}

#[test]
fn kfold_on_reference_counts() {
    let labels: Vec<u8> = (0..202).map(|i| (i < 50) as u8).collect();
    let folds = stratified_kfold(&labels, 5, 9).unwrap();
    for f in &folds {
        let pos = f.iter().filter(|&&i| labels[i] == 1).count();
        let neg = f.len() - pos;
        assert!(pos == 10, "{pos}");
        assert!((30..=31).contains(&neg), "{neg}");
    }
    assert!(stratified_kfold(&labels, 1, 0).is_err());
    assert!(stratified_kfold(&[1, 1, 0, 0, 0], 3, 0).is_err());
    assert!(stratified_kfold(&[1, 1, 2, 0, 0], 2, 0).is_err());
}

proptest! {
    #[test]
    fn kfold_partitions_and_stratifies(
        labels in prop::collection::vec(0u8..2, 10..120),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let pos = labels.iter().filter(|&&y| y == 1).count();
        prop_assume!(pos >= k && labels.len() - pos >= k);
        let folds = stratified_kfold(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for f in &folds {
            prop_assert!(f.windows(2).all(|w| w[0] < w[1]));
            let fp = f.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let fneg = f.len() as f64 - fp;
            let neg = (labels.len() - pos) as f64;
            prop_assert!((fp - pos as f64 / k as f64).abs() < 1.0);
            prop_assert!((fneg - neg / k as f64).abs() < 1.0);
        }
        prop_assert_eq!(folds, stratified_kfold(&labels, k, seed).unwrap());
    }

    #[test]
    fn f1_is_permutation_invariant(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (p, y): (Vec<f64>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng::stream(seed, "perm"));
        let (sp, sy): (Vec<f64>, Vec<u8>) = shuffled.into_iter().unzip();
        let a = f1(&p, &y, 0.5).unwrap();
        prop_assert_eq!(a, f1(&sp, &sy, 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn synthetic_set_contract() {
    let p = tiny_synth();
    let ds = synth_dataset(&p).unwrap();
    assert_eq!(ds, synth_dataset(&p).unwrap());
    assert_eq!((ds.count(1), ds.count(0)), (10, 20));
    assert_eq!(ds.names[0], "pos_0000");
    assert_eq!(ds.names[10], "neg_0000");
    for i in 0..ds.len() {
        let mask = ds.masks[i].as_ref().unwrap();
        if ds.labels[i] == 1 {
            let area = mask.iter().filter(|&&b| b).count();
            assert!(area > 0 && area < mask.len() / 2, "{area}");
        } else {
            assert!(mask.is_empty());
        }
    }
    let other = synth_dataset(&SynthParams { seed: 1, ..p }).unwrap();
    assert_ne!(ds.images[0], other.images[0]);
    for bad in [
        SynthParams { hue_shift: 0.0, ..p },
        SynthParams { patch_min: 0.2, patch_max: 0.1, ..p },
        SynthParams { n_pos: 1, n_neg: 1, ..p },
        SynthParams { extent: 4, ..p },
    ] {
        assert!(synth_dataset(&bad).is_err());
    }
}

#[test]
fn patches_differ_from_background_only_in_hue() {
    let ds = synth_dataset(&tiny_synth()).unwrap();
    for i in (0..ds.len()).filter(|&i| ds.labels[i] == 1) {
        let img = &ds.images[i];
        let flat = hue_neutralized(img, tiny_synth().hue);
        let mask = ds.masks[i].as_ref().unwrap();
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for (j, (a, b)) in img.pixels().zip(flat.pixels()).enumerate() {
            let d = ciede2000(srgb(a.0), srgb(b.0));
            if mask[j] {
                inside += d;
                ni += 1;
            } else {
                outside += d;
                no += 1;
            }
        }
        let (inside, outside) = (inside / ni as f64, outside / no as f64);
        assert!(inside >= 3.0 * outside, "image {i}: {inside} vs {outside}");
    }
}

fn srgb(p: [u8; 3]) -> crate::colorlab::LabPixel {
    crate::colorlab::srgb_to_lab(p[0], p[1], p[2])
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(&SynthParams {
        n_pos: 3,
        n_neg: 4,
        extent: 16,
        ..SynthParams::default()
    })
    .unwrap();
    ds.write(dir.path()).unwrap();
    let back = load_dataset(dir.path(), 16, Resize::Nearest).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.names, ds.names);
    assert_eq!(back.masks, ds.masks);
    assert!(back.maps.is_none());
    let small = load_dataset(dir.path(), 8, Resize::Bilinear).unwrap();
    assert_eq!(small.images[0].dimensions(), (8, 8));
    std::fs::remove_dir_all(dir.path().join("negative")).unwrap();
    assert!(load_dataset(dir.path(), 16, Resize::Nearest).is_err());
}

#[test]
fn config_validation() {
    let ok = tiny_config(vec![Variant::Baseline, Variant::DirectAttention]);
    ok.validate().unwrap();
    let json = serde_json::to_string(&ok).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), ok);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"folds": 3}"#).unwrap();
    assert_eq!(partial.folds, 3);
    assert_eq!(partial.extent, 64);
    for bad in [
        ExperimentConfig { folds: 1, ..ok.clone() },
        ExperimentConfig { seeds: vec![], ..ok.clone() },
        ExperimentConfig { points: vec![6], ..ok.clone() },
        ExperimentConfig { points: vec![], ..ok.clone() },
        ExperimentConfig { variants: vec![], ..ok.clone() },
        ExperimentConfig { extent: 64, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn direct_map_block_means() {
    let m = Tensor::from_fn(&[4, 4, 1], |i| if i % 4 < 2 { 0.0 } else { 2.0 });
    let s2 = (1.0 / (1.0 + (-2.0f64).exp())) as f32;
    assert_eq!(models::direct_map(&m, 2, 2), vec![0.5, s2, 0.5, s2]);
    let one = models::direct_map(&m, 1, 1);
    assert_eq!(one, vec![(1.0 / (1.0 + (-1.0f64).exp())) as f32]);
    assert_eq!(models::direct_map(&m, 3, 3).len(), 9);
}

#[test]
fn wiring_null_test_matches_baseline_exactly() {
    let mut cfg = tiny_config(vec![Variant::Baseline, Variant::Caan(CaanVariant::ResnetBased)]);
    cfg.zero_attention = true;
    let rows = run_experiment(&cfg).unwrap();
    let base = rows.iter().find(|r| r.variant == Variant::Baseline).unwrap();
    let lea: Vec<_> = rows.iter().filter(|r| r.variant != Variant::Baseline && !r.best).collect();
    assert_eq!(lea.len(), 5);
    for r in lea {
        assert_eq!(r.folds, base.folds, "point {:?}", r.point);
    }
}

#[test]
fn experiment_rows_and_reports() {
    let cfg = ExperimentConfig {
        points: vec![2, 4],
        ..tiny_config(vec![
            Variant::Caan(CaanVariant::MobilenetLike),
            Variant::Baseline,
            Variant::FourChannelInput,
            Variant::DirectAttention,
        ])
    };
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows, run_experiment(&cfg).unwrap());
    assert_eq!(rows.len(), 1 + 1 + 3 + 3);
    assert_eq!(rows[0].variant, Variant::Baseline);
    for r in &rows {
        assert_eq!(r.folds.len(), 2);
        assert!(r.folds.iter().all(|f| (0.0..=1.0).contains(f)));
    }
    let best: Vec<_> = rows.iter().filter(|r| r.best).collect();
    assert_eq!(best.len(), 2);
    let csv = fold_csv(&rows);
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    assert!(csv.starts_with("variant,point,seed,fold,f1\nbaseline,,3,0,"));
    let summary = summary_csv(&rows);
    assert_eq!(summary.lines().count(), 1 + 6 + 2);
    assert!(summary.lines().any(|l| l.starts_with("direct_attention,best:")));
    let meta = metadata_json(&cfg, serde_json::Value::Null).unwrap();
    assert!(meta.contains(NORMALIZATION));
}

#[test]
fn summary_pools_seeds_and_breaks_ties_low() {
    let v = Variant::DirectAttention;
    let rows = vec![
        MetricsRow::new(v, Some(1), 0, vec![0.5, 1.0]),
        MetricsRow::new(v, Some(1), 1, vec![1.0, 0.5]),
        MetricsRow::new(v, Some(2), 0, vec![0.75, 0.75]),
        MetricsRow::new(v, Some(2), 1, vec![0.75, 0.75]),
    ];
    let s = summarize(&rows);
    assert_eq!(s.len(), 3);
    assert_eq!(s[0].mean, 0.75);
    assert!((s[0].std - (1.0f64 / 12.0).sqrt()).abs() < 1e-12);
    assert_eq!(s[1].std, 0.0);
    assert!(s[2].best);
    assert_eq!(s[2].point, Some(1));
    assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
}

#[test]
fn imbalance_sweep_keeps_negatives() {
    let cfg = tiny_config(vec![Variant::Baseline]);
    let groups = imbalance_sweep(&cfg, &[0.33, 0.1]).unwrap();
    assert_eq!(groups.len(), 2);
    assert_eq!((groups[0].positives, groups[0].negatives), (10, 20));
    assert_eq!((groups[1].positives, groups[1].negatives), (2, 20));
    assert!(groups.iter().all(|g| g.rows.len() == 1));
    assert!(imbalance_sweep(&cfg, &[0.05]).is_err());
    assert!(imbalance_sweep(&cfg, &[]).is_err());
}

#[test]
fn trained_checkpoints_round_trip() {
    let cfg = tiny_config(vec![]);
    let ds = synth_dataset(&tiny_synth()).unwrap();
    let maps: Vec<AnomalyMap> = ds
        .images
        .iter()
        .map(|img| AnomalyMap {
            width: 32,
            height: 32,
            values: img.pixels().map(|p| p[1] as f64 / 4.0).collect(),
            normalized: None,
        })
        .collect();
    let data = Prepared::new(&ds, &maps);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (v, p) in [
        (Variant::DirectAttention, Some(3)),
        (Variant::AnomalyMapInput, None),
        (Variant::Caan(CaanVariant::ResnetBased), Some(2)),
    ] {
        let samples = data.samples(v, &idx).unwrap();
        let mut m = Trained::fit(&cfg, v, p, &samples, &cfg.train, 5).unwrap();
        let ck = crate::tensor::Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap();
        let mut back = Trained::from_checkpoint(&ck).unwrap();
        assert_eq!((back.variant(), back.point()), (v, p));
        let refs: Vec<&Sample> = samples.iter().collect();
        assert_eq!(m.predict(&refs).unwrap(), back.predict(&refs).unwrap());
    }
    assert!(Trained::new(&cfg, Variant::DirectAttention, None, 0).is_err());
}

#[test]
fn feature_dump_is_consistent() {
    let adn = build_adn(AdnVariant::BasicCnn, 1.0 / 16.0, 32).unwrap();
    let caan = build_caan_with_outputs(CaanVariant::ResnetBased, 1.0 / 16.0, 32, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = Sample::new(
        Tensor::from_fn(&[32, 32, 3], |i| (i % 17) as f32 / 17.0),
        Tensor::from_fn(&[32, 32, 1], |i| (i % 5) as f32 / 5.0),
        1,
    )
    .unwrap();
    for p in 1..=5 {
        let mut model = LeaModel::new(&adn, &caan, p, 1).unwrap();
        model.adn_mut().init_running_stats();
        model.caan_mut().init_running_stats();
        let dump = dump_feature_maps(&mut model, &s, dir.path()).unwrap();
        assert!(dump.files.iter().all(|f| f.is_file()));
        let c = dump.before.shape()[2];
        for (i, px) in dump.before.data().chunks(c).enumerate() {
            let m = dump.attention.data()[i];
            for (j, &b) in px.iter().enumerate() {
                assert_eq!(dump.after.data()[i * c + j], b * (m + 1.0));
            }
        }
        let (w, h, raw) = crate::colorlab::io::read_f32_grid(&dir.path().join(format!("raw/p{p}_after.f32"))).unwrap();
        assert_eq!((w as usize, h as usize), (dump.after.shape()[1], dump.after.shape()[0]));
        assert_eq!(raw, channel_mean(&dump.after));
    }
    let mut zero = LeaModel::new(&adn, &caan, 2, 1).unwrap();
    zero.path = AttentionPath::Zero;
    zero.adn_mut().init_running_stats();
    zero.caan_mut().init_running_stats();
    let dump = dump_feature_maps(&mut zero, &s, dir.path()).unwrap();
    assert_eq!(dump.before, dump.after);
}
