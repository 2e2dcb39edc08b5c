use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::netspec::{build_adn, build_caan, build_caan_with_outputs, AdnVariant, CaanVariant};

fn specs(adn: AdnVariant, extent: usize) -> (NetworkSpec, NetworkSpec) {
    (
        build_adn(adn, 1.0 / 16.0, extent).unwrap(),
        build_caan_with_outputs(CaanVariant::ResnetBased, 1.0 / 16.0, extent, 1).unwrap(),
    )
}

fn samples(n: usize, extent: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng::stream(seed, "samples");
    (0..n)
        .map(|i| {
            let x = Tensor::from_fn(&[extent, extent, 3], |_| r.random_range(0.0..1.0));
            let m = Tensor::from_fn(&[extent, extent, 1], |_| r.random_range(0.0..0.3));
            Sample::new(x, m, (i % 2) as u8).unwrap()
        })
        .collect()
}

#[test]
fn attention_map_examples() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros(&[1, 3, 3, 4]));
    let m = attention_map(&mut g, z).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    assert_eq!(g.value(m).shape(), &[1, 3, 3, 1]);

    let c = g.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
    let m = attention_map(&mut g, c).unwrap();
    assert!((g.value(m).data()[0] - 1.0 / (1.0 + (-2.0f32).exp())).abs() < 1e-7);

    let mut r = rng::stream(1, "feat");
    let f = g.constant(Tensor::from_fn(&[1, 4, 4, 8], |_| r.random_range(-3.0..3.0)));
    let m = attention_map(&mut g, f).unwrap();
    let avg = g.pool(f, PoolKind::ChannelAvg, 0).unwrap();
    let s = g.activate(avg, Activation::Sigmoid);
    assert_eq!(g.value(m), g.value(s));
}

#[test]
fn apply_attention_examples() {
    let mut g = Graph::<f32>::new();
    let f = g.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, -2.0]).unwrap());
    let half = g.constant(Tensor::full(&[1, 1, 1, 1], 0.5));
    let out = apply_attention(&mut g, f, half).unwrap();
    assert_eq!(g.value(out).data(), &[1.5, -3.0]);

    let mut r = rng::stream(2, "f");
    let f = g.constant(Tensor::from_fn(&[2, 3, 3, 5], |_| r.random_range(-5.0..5.0)));
    let zero = g.constant(Tensor::zeros(&[2, 3, 3, 1]));
    let one = g.constant(Tensor::ones(&[2, 3, 3, 1]));
    let a = apply_attention(&mut g, f, zero).unwrap();
    let b = apply_attention(&mut g, f, one).unwrap();
    assert_eq!(g.value(a), g.value(f));
    let twice: Vec<f32> = g.value(f).data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.value(b).data(), &twice[..]);

    let wrong = g.constant(Tensor::zeros(&[2, 2, 3, 1]));
    assert!(apply_attention(&mut g, f, wrong).is_err());
}

#[test]
fn total_loss_examples() {
    assert!(total_loss(1.0 - 1e-9, 1.0 - 1e-9, 1).total < 1e-6);
    assert!((total_loss(0.5, 0.5, 0).total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let l = total_loss(0.9, 0.6, 1);
    assert!((l.total - 0.616_186_139_423_817_3).abs() < 1e-12, "{l:?}");
    assert_eq!(l.total, l.attention + l.detection);
}

#[test]
fn zero_attention_matches_plain_adn_bitwise() {
    let (adn, caan) = specs(AdnVariant::Resnet18Like, 32);
    let mut model = LeaModel::<f32>::new(&adn, &caan, 3, 4).unwrap();
    model.path = AttentionPath::Zero;
    let mut plain = model.adn().clone();
    let data = samples(3, 32, 4);
    let batch: Vec<&Sample> = data.iter().collect();

    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let (x, m) = model.batch_inputs(&mut g, &batch).unwrap();
    let out = model.forward(&mut g, &vars, x, m, Mode::Train).unwrap();
    assert!(g.value(out.attention).data().iter().all(|&v| v == 0.0));
    let pv = plain.bind(&mut g, 1000);
    let alone = plain.forward(&mut g, &pv, x, Mode::Train, None).unwrap();
    assert_eq!(g.value(out.y_ad), g.value(alone.output));
    assert_eq!(g.value(out.before), g.value(out.after));
}

#[test]
fn manual_composition_matches_forward() {
    let (adn, caan) = specs(AdnVariant::BasicCnn, 32);
    let mut model = LeaModel::<f32>::new(&adn, &caan, 2, 5).unwrap();
    let (mut a, mut c) = (model.adn().clone(), model.caan().clone());
    let data = samples(2, 32, 5);
    let batch: Vec<&Sample> = data.iter().collect();

    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let (x, m) = model.batch_inputs(&mut g, &batch).unwrap();
    let out = model.forward(&mut g, &vars, x, m, Mode::Train).unwrap();

    let mut h = Graph::new();
    let av = a.bind(&mut h, 0);
    let cv = c.bind(&mut h, av.len());
    let x2 = h.constant(g.value(x).clone());
    let m2 = h.constant(g.value(m).clone());
    let caan_run = c.forward(&mut h, &cv, m2, Mode::Train, None).unwrap();
    let feats = caan_run.layers[caan.attention_row(2).unwrap()];
    let map = attention_map(&mut h, feats).unwrap();
    let row = adn.attention_row(2).unwrap();
    let mut hook = |h: &mut Graph<f32>, p: u8, y: Var| if p == 2 { apply_attention(h, y, map) } else { Ok(y) };
    let adn_run = a.forward(&mut h, &av, x2, Mode::Train, Some(&mut hook)).unwrap();
    assert_eq!(g.value(out.y_ad), h.value(adn_run.output));
    assert_eq!(g.value(out.y_att), h.value(caan_run.output));
    assert_eq!(g.value(out.after), h.value(adn_run.layers[row]));
    let y = g.value(out.y_ad).data();
    assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn detection_loss_reaches_caan_through_attention() {
    let (adn, caan) = specs(AdnVariant::BasicCnn, 32);
    let mut model = LeaModel::<f32>::new(&adn, &caan, 3, 6).unwrap();
    let data = samples(4, 32, 6);
    let batch: Vec<&Sample> = data.iter().collect();
    let (la, _, joint) = model.gradients(&batch).unwrap();
    model.path = AttentionPath::Detached;
    let (lb, _, detached) = model.gradients(&batch).unwrap();
    assert_eq!(la, lb);
    let diff: f64 = joint
        .iter()
        .zip(&detached)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64))
        .sum();
    assert!(diff > 0.0);
}

#[test]
fn training_is_deterministic_and_rejects_one_class() {
    let (adn, caan) = specs(AdnVariant::BasicCnn, 32);
    let data = samples(8, 32, 7);
    let cfg = TrainConfig {
        epochs: 2,
        batch: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = LeaModel::<f32>::new(&adn, &caan, 4, 7).unwrap();
        let h = m.train(&data, &cfg).unwrap();
        (h, m.to_checkpoint("n").to_bytes())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
    assert_eq!(h1.len(), 2);
    for l in &h1 {
        assert_eq!(l.total, l.attention + l.detection);
    }
    let mut one = data.clone();
    one.iter_mut().for_each(|s| s.y = 1);
    let mut m = LeaModel::<f32>::new(&adn, &caan, 4, 7).unwrap();
    assert!(m.train(&one, &cfg).is_err());
    assert!(m.train(&[], &cfg).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let (adn, caan) = specs(AdnVariant::Resnet18Like, 32);
    let mut model = LeaModel::<f32>::new(&adn, &caan, 5, 8).unwrap();
    let data = samples(4, 32, 8);
    model
        .train(
            &data,
            &TrainConfig {
                epochs: 1,
                batch: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
    let ck = Checkpoint::from_bytes(&model.to_checkpoint("min").to_bytes()).unwrap();
    assert_eq!(ck.meta("normalization"), Some("min"));
    let mut back = LeaModel::from_checkpoint(&ck).unwrap();
    assert_eq!(back.point(), 5);
    let batch: Vec<&Sample> = data.iter().collect();
    assert_eq!(model.predict(&batch).unwrap(), back.predict(&batch).unwrap());
}

#[test]
fn construction_errors() {
    let (adn, caan) = specs(AdnVariant::BasicCnn, 32);
    assert!(LeaModel::<f32>::new(&adn, &caan, 6, 0).is_err());
    let two = build_caan(CaanVariant::ResnetBased, 1.0 / 16.0, 32).unwrap();
    assert!(LeaModel::<f32>::new(&adn, &two, 1, 0).is_err());
    let (big, _) = specs(AdnVariant::BasicCnn, 64);
    assert!(LeaModel::<f32>::new(&big, &caan, 1, 0).is_err());
    let x = Tensor::zeros(&[4, 4, 3]);
    assert!(Sample::new(x.clone(), Tensor::zeros(&[4, 5, 1]), 0).is_err());
    assert!(Sample::new(x, Tensor::zeros(&[4, 4, 1]), 2).is_err());
}

proptest! {
    #[test]
    fn attention_preserves_sign_and_bounds(
        vals in prop::collection::vec(-1e3f32..1e3, 12),
        feats in prop::collection::vec(-50f32..50.0, 4),
    ) {
        let mut g = Graph::<f32>::new();
        let f = g.constant(Tensor::new(&[1, 2, 2, 3], vals.clone()).unwrap());
        let src = g.constant(Tensor::new(&[1, 2, 2, 1], feats).unwrap());
        let m = attention_map(&mut g, src).unwrap();
        prop_assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let out = apply_attention(&mut g, f, m).unwrap();
        for (&a, &b) in vals.iter().zip(g.value(out).data()) {
            prop_assert_eq!(a.signum() == b.signum() || a == 0.0, true);
            prop_assert!(a.abs() <= b.abs() && b.abs() <= 2.0 * a.abs());
        }
    }
}
