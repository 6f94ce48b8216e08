use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::EncoderConfig;
use crate::signal::Label;
use crate::tensor::gradcheck::check_params;

fn tiny_encoder(seed: u64) -> Encoder {
    let cfg = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        ffn_hidden: 8,
        input_channels: 3,
        ..Default::default()
    };
    Encoder::new(cfg, seed).unwrap()
}

fn tiny_config() -> ClassifierConfig {
    ClassifierConfig {
        channel_heads: 4,
        decoder_heads: 2,
        decoder_ffn: 8,
        ..Default::default()
    }
}

fn model(seed: u64) -> ClassifierModel {
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed + 100));
    ClassifierModel::new(tiny_encoder(seed), &tiny_config(), &mut init, seed).unwrap()
}

fn trial(id: &str, len: usize, label: Label, phase: f64) -> Trial {
    let ch = (0..3)
        .map(|c| (0..len).map(|t| 6.0 + 3.0 * ((t as f64 + phase) * 0.4 + c as f64).sin()).collect())
        .collect();
    Trial::new(id, "s", "k", label, 0, ch).unwrap()
}

fn trials() -> Vec<Trial> {
    vec![
        trial("a", 8, Label::Fail, 0.0),
        trial("b", 6, Label::Pass, 1.0),
        trial("c", 7, Label::Fail, 2.0),
        trial("d", 5, Label::Pass, 3.0),
    ]
}

#[test]
fn zeroed_values_make_channel_attention_the_identity() {
    let mut m = model(0);
    m.channel.zero_values();
    let data = trials();
    let refs: Vec<&Trial> = data.iter().collect();
    let batch = pad_batch(&refs).unwrap();
    let mut g = Graph::new();
    let p = m.channel.params.bind(&mut g);
    let x = RawInput.apply(&mut g, &batch).unwrap();
    let pass = m.channel.forward(&mut g, &p, x, &batch.mean_weights(), 4, None).unwrap();
    assert_eq!(g.value(pass.out), batch.time_major().as_slice());
}

#[test]
fn channel_weights_per_head_sum_to_one() {
    let m = model(1);
    let data = trials();
    let refs: Vec<&Trial> = data.iter().collect();
    let batch = pad_batch(&refs).unwrap();
    let mut g = Graph::new();
    let p = m.channel.params.bind(&mut g);
    let x = RawInput.apply(&mut g, &batch).unwrap();
    let pass = m.channel.forward(&mut g, &p, x, &batch.mean_weights(), 4, None).unwrap();
    let probs = g.attention_probs(pass.gate).unwrap();
    for row in probs.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&w| w >= 0.0));
    }
}

#[test]
fn zero_head_gives_one_half() {
    let mut m = model(2);
    m.decoder.zero_head();
    let pred = predict(&m, &trials(), &RawInput, ForwardOptions::default()).unwrap();
    assert!(pred.probs.iter().all(|&p| p == 0.5));
}

#[test]
fn maps_are_distributions_over_valid_steps() {
    let data = trials();
    let pred = predict(&model(3), &data, &RawInput, ForwardOptions::default()).unwrap();
    for (map, t) in pred.maps.iter().zip(&data) {
        assert_eq!(map.temporal_weights.len(), t.len());
        assert!((map.temporal_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((map.channel_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(map.channel_weights.iter().chain(&map.temporal_weights).all(|&w| w >= 0.0));
    }
    assert!(pred.probs.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn bypass_keeps_shapes() {
    let data = trials();
    let opts = ForwardOptions {
        channel_attention: false,
    };
    let pred = predict(&model(3), &data, &RawInput, opts).unwrap();
    assert_eq!(pred.probs.len(), 4);
    assert!((pred.maps[0].channel_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn decoder_requires_both_layers() {
    let m = model(4);
    let mut g = Graph::new();
    let p = m.decoder.params.bind(&mut g);
    let layer = g.constant(vec![4, 8], vec![0.5; 32]).unwrap();
    let err = m.decoder.forward(&mut g, &p, &[layer], &[true; 4], 1, None);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn ensemble_of_one_matches_predict() {
    let data = trials();
    let m = model(5);
    let single = predict(&m, &data, &RawInput, ForwardOptions::default()).unwrap();
    let ens = predict_ensemble(std::slice::from_ref(&m), &data, &RawInput, ForwardOptions::default()).unwrap();
    assert_eq!(single.probs, ens.probs);
    for (a, b) in single.maps.iter().zip(&ens.maps) {
        for (x, y) in a.temporal_weights.iter().zip(&b.temporal_weights) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn ensemble_averages_probabilities() {
    let data = trials();
    let models = [model(6), model(7)];
    let ens = predict_ensemble(&models, &data, &RawInput, ForwardOptions::default()).unwrap();
    for i in 0..data.len() {
        let expect = (ens.per_model[0][i] + ens.per_model[1][i]) / 2.0;
        assert!((ens.probs[i] - expect).abs() < 1e-15);
    }
    assert!(predict_ensemble(&[], &data, &RawInput, ForwardOptions::default()).is_err());
}

fn loss_graph(m: &ClassifierModel, data: &[Trial]) -> (Graph, Var, ModelBound) {
    let refs: Vec<&Trial> = data.iter().collect();
    let batch = pad_batch(&refs).unwrap();
    let labels: Vec<f64> = data.iter().map(|t| t.label.as_f64()).collect();
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let x = RawInput.apply(&mut g, &batch).unwrap();
    let pass = m.forward(&mut g, &b, x, &batch, ForwardOptions::default(), None).unwrap();
    let loss = g.bce_with_logits(pass.logits, &labels).unwrap();
    (g, loss, b)
}

#[test]
fn channel_and_decoder_gradients_through_frozen_encoder() {
    let data = trials();
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(8));
    init.std = 0.5;
    let base = ClassifierModel::new(tiny_encoder(8), &tiny_config(), &mut init, 8).unwrap();
    let channel_err = check_params(
        &base.channel.params,
        |store| {
            let mut m = base.clone();
            m.channel.params = store.clone();
            let (g, loss, b) = loss_graph(&m, &data);
            Ok((g, loss, b.channel))
        },
        12,
        1e-5,
    )
    .unwrap();
    assert!(channel_err < 1e-4, "channel attention: {channel_err}");
    let decoder_err = check_params(
        &base.decoder.params,
        |store| {
            let mut m = base.clone();
            m.decoder.params = store.clone();
            let (g, loss, b) = loss_graph(&m, &data);
            Ok((g, loss, b.decoder))
        },
        12,
        1e-5,
    )
    .unwrap();
    assert!(decoder_err < 1e-4, "decoder: {decoder_err}");
}

#[test]
fn frozen_encoder_passes_gradient_upstream() {
    let data = trials();
    let m = model(9);
    assert!(m.encoder.is_frozen());
    let (g, loss, b) = loss_graph(&m, &data);
    let mut grads = g.backward(loss).unwrap();
    let mut channel = m.channel.params.clone();
    channel.collect_grads(&b.channel, &mut grads).unwrap();
    let norm: f64 = channel
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    assert!(norm > 0.0);
}

#[test]
fn one_head_ranking_survives_logit_scaling() {
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(11));
    let cfg = ClassifierConfig {
        channel_heads: 1,
        ..tiny_config()
    };
    let m = ClassifierModel::new(tiny_encoder(11), &cfg, &mut init, 11).unwrap();
    let data = trials();
    let weights = |m: &ClassifierModel| predict(m, &data, &RawInput, ForwardOptions::default()).unwrap().maps[0]
        .channel_weights
        .clone();
    let rank = |w: &[f64]| {
        let mut idx: Vec<usize> = (0..w.len()).collect();
        idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        idx
    };
    let before = weights(&m);
    let mut hot = m.clone();
    let wq = hot.channel.params.by_name("channel.wq").unwrap().clone();
    let scaled: Vec<f64> = wq.values().iter().map(|v| v * 3.0).collect();
    hot.channel.params.set_values("channel.wq", wq.shape(), scaled).unwrap();
    let after = weights(&hot);
    assert_eq!(rank(&before), rank(&after));
    assert_ne!(before, after);
}

#[test]
fn training_rejects_single_class_and_keeps_encoder() {
    let data = trials();
    let one_class: Vec<Trial> = data.iter().filter(|t| t.label == Label::Fail).cloned().collect();
    let enc = tiny_encoder(12);
    let cfg = SupervisedConfig {
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };
    let err = train_one(&one_class, &enc, &tiny_config(), &cfg, 0);
    assert!(matches!(err, Err(Error::Training { .. })));
    let before = enc.checksum();
    let trained = train_one(&data, &enc, &tiny_config(), &cfg, 0).unwrap();
    assert_eq!(trained.encoder.checksum(), before);
}

#[test]
fn validation_split_is_stratified_and_disjoint() {
    let mut data = trials();
    data.extend(trials());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (train, val) = split_validation(&data, 0.25, &mut rng);
    assert_eq!(train.len() + val.len(), data.len());
    assert!(val.iter().all(|i| !train.contains(i)));
    let pos = val.iter().filter(|&&i| data[i].label.is_positive()).count();
    assert_eq!((pos, val.len() - pos), (1, 1));
}
