use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::classifier::{predict_ensemble, ClassifierConfig, RawInput};
use crate::encoder::{Encoder, EncoderConfig};
use crate::signal::Label;
use crate::synth::{generate_trials, SynthConfig};
use crate::tensor::gradcheck::check_params;

fn tiny_model(seed: u64) -> ClassifierModel {
    let enc = Encoder::new(
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            ffn_hidden: 8,
            input_channels: 3,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let cfg = ClassifierConfig {
        channel_heads: 2,
        decoder_heads: 2,
        decoder_ffn: 8,
        ..Default::default()
    };
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed + 50));
    ClassifierModel::new(enc, &cfg, &mut init, seed).unwrap()
}

fn ood_trials(subjects: usize, per_subject: usize) -> Vec<Trial> {
    let cfg = SynthConfig {
        n_subjects: subjects,
        trials_per_subject: per_subject,
        channels: 2,
        planted_channels: vec![1],
        t_min: 8,
        t_max: 12,
        subtask_count: 2,
        positive_fraction: 2.0 / 3.0,
        seed: 3,
        ..Default::default()
    };
    generate_trials(&cfg).unwrap().0
}

fn quick() -> AdapterConfig {
    AdapterConfig {
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    }
}

fn init(seed: u64) -> Initializer {
    let mut i = Initializer::new(ChaCha8Rng::seed_from_u64(seed));
    i.std = 0.5;
    i
}

#[test]
fn budget_is_enforced() {
    let a = Adapter::new(12, 16, 12, &mut init(0)).unwrap();
    assert_eq!(a.param_count(), 336);
    assert_eq!(max_hidden(12, 16), 71);
    assert!(Adapter::new(12, 16, 71, &mut init(0)).is_ok());
    assert!(matches!(Adapter::new(12, 16, 72, &mut init(0)), Err(Error::Config(_))));
    assert!(matches!(Adapter::new(20, 20, 50, &mut init(0)), Err(Error::Config(_))));
}

#[test]
fn biases_are_outside_the_parameter_store() {
    let a = Adapter::new(4, 3, 5, &mut init(1)).unwrap();
    let names: Vec<&str> = a.params.iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["adapter.w1", "adapter.w2"]);
    assert_eq!(a.params.trainable_count(), 4 * 5 + 5 * 3);
    let (b1, b2) = a.biases();
    assert!(b1.iter().chain(b2).all(|&b| b == 0.0));
}

fn forward(a: &Adapter, data: &[Trial]) -> (Vec<f64>, Vec<usize>, Batch) {
    let refs: Vec<&Trial> = data.iter().collect();
    let batch = pad_batch(&refs).unwrap();
    let mut g = Graph::new();
    let x = a.apply(&mut g, &batch).unwrap();
    (g.value(x).to_vec(), g.shape(x).to_vec(), batch)
}

#[test]
fn zero_weights_give_zero_output() {
    let mut a = Adapter::new(2, 3, 4, &mut init(2)).unwrap();
    for name in ["adapter.w1", "adapter.w2"] {
        let shape = a.params.by_name(name).unwrap().shape().to_vec();
        let n = shape.iter().product();
        a.params.set_values(name, &shape, vec![0.0; n]).unwrap();
    }
    let (y, _, _) = forward(&a, &ood_trials(1, 3));
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn output_has_model_width_and_keeps_padding() {
    let a = Adapter::new(2, 3, 4, &mut init(3)).unwrap();
    let data = ood_trials(1, 4);
    let (y, shape, batch) = forward(&a, &data);
    assert_eq!(shape, [batch.size() * batch.max_len, 3]);
    for (row, &valid) in y.chunks(3).zip(&batch.mask) {
        if !valid {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }
    assert!(y.iter().any(|&v| v != 0.0));
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let a = Adapter::new(5, 3, 4, &mut init(4)).unwrap();
    let data = ood_trials(1, 2);
    let refs: Vec<&Trial> = data.iter().collect();
    let mut g = Graph::new();
    let err = a.apply(&mut g, &pad_batch(&refs).unwrap());
    assert!(matches!(err, Err(Error::Shape(_))));
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let model = tiny_model(5);
    let data = ood_trials(1, 4);
    let base = Adapter::new(2, 3, 4, &mut init(5)).unwrap();
    let err = check_params(
        &base.params,
        |store| {
            let mut a = base.clone();
            a.params = store.clone();
            let refs: Vec<&Trial> = data.iter().collect();
            let batch = pad_batch(&refs).unwrap();
            let labels: Vec<f64> = data.iter().map(|t| t.label.as_f64()).collect();
            let mut g = Graph::new();
            let p = a.params.bind(&mut g);
            let x = a.forward(&mut g, &p, &batch)?;
            let b = model.bind(&mut g);
            let pass = model.forward(&mut g, &b, x, &batch, ForwardOptions::default(), None)?;
            let loss = g.bce_with_logits(pass.logits, &labels)?;
            Ok((g, loss, p))
        },
        10,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "adapter: {err}");
}

#[test]
fn training_updates_only_the_weights() {
    let models = [tiny_model(6), tiny_model(7)];
    let before: Vec<[u8; 32]> = models.iter().map(ClassifierModel::checksum).collect();
    let data = ood_trials(2, 6);
    let fresh = Adapter::new(2, 3, max_hidden(2, 3), &mut {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        let mut i = Initializer::new(rng);
        i.std = quick().init_std;
        i
    })
    .unwrap();
    let a = train_adapter(&data, &models, &quick(), 9).unwrap();
    assert_ne!(a.params.checksum(), fresh.params.checksum());
    let (b1, b2) = a.biases();
    assert!(b1.iter().chain(b2).all(|&b| b == 0.0));
    assert!(a.params.is_frozen());
    let after: Vec<[u8; 32]> = models.iter().map(ClassifierModel::checksum).collect();
    assert_eq!(before, after);
    let pred = predict_ensemble(&models, &data, &a, ForwardOptions::default()).unwrap();
    assert!(pred.probs.iter().all(|p| p.is_finite()));
}

#[test]
fn training_is_deterministic_and_rejects_one_class() {
    let models = [tiny_model(8)];
    let data = ood_trials(1, 6);
    let a = train_adapter(&data, &models, &quick(), 1).unwrap();
    let b = train_adapter(&data, &models, &quick(), 1).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    let one: Vec<Trial> = data.iter().filter(|t| t.label == Label::Fail).cloned().collect();
    assert!(matches!(train_adapter(&one, &models, &quick(), 1), Err(Error::Training { .. })));
}

#[test]
fn member_selection() {
    let models = [tiny_model(1), tiny_model(2), tiny_model(3)];
    let cfg = AdapterConfig {
        ensemble_members: 2,
        ..quick()
    };
    assert_eq!(cfg.members(&models).len(), 2);
    assert_eq!(quick().members(&models).len(), 3);
    let raw = predict_ensemble(&models, &ood_trials(1, 2), &RawInput, ForwardOptions::default());
    assert!(matches!(raw, Err(Error::Shape(_))));
}

#[test]
fn kshot_draws_are_balanced() {
    let data = ood_trials(3, 27);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pick = draw_kshot(&data, 30, &mut rng).unwrap();
    let pos = pick.iter().filter(|&&i| data[i].label.is_positive()).count();
    assert_eq!((pos, pick.len() - pos), (15, 15));
    assert!(matches!(draw_kshot(&data, 7, &mut rng), Err(Error::Config(_))));
    let small = ood_trials(1, 9);
    assert!(matches!(draw_kshot(&small, 10, &mut rng), Err(Error::Protocol(_))));
}

#[test]
fn folds_partition_the_pool_by_class() {
    let data = ood_trials(2, 12);
    let pool: Vec<usize> = (0..data.len()).step_by(2).collect();
    let folds = stratified_folds(&data, &pool, 3, &mut ChaCha8Rng::seed_from_u64(1));
    let mut all: Vec<usize> = folds.concat();
    all.sort_unstable();
    assert_eq!(all, pool);
    for f in &folds {
        let pos = f.iter().filter(|&&i| data[i].label.is_positive()).count();
        assert!(pos > 0 && pos < f.len());
    }
}

#[test]
fn kshot_protocol_counts_and_determinism() {
    let models = [tiny_model(10)];
    let data = ood_trials(2, 12);
    let cfg = KshotConfig::default();
    let adapter = AdapterConfig {
        epochs: 1,
        ..quick()
    };
    let report = kshot_protocol(&data, &models, 10, &cfg, &adapter, 4).unwrap();
    assert_eq!(report.evaluations.len(), 72);
    assert_eq!(report.draws.len(), 24);
    for d in &report.draws {
        assert_eq!(d.trial_ids.len(), 10);
    }
    let again = kshot_protocol(&data, &models, 10, &cfg, &adapter, 4).unwrap();
    assert_eq!(report, again);
    let r = kshot_protocol(&data, &models, 20, &cfg, &adapter, 4);
    assert!(matches!(r, Err(Error::Protocol(_))));
}

#[test]
fn loso_holds_out_each_subject() {
    let models = [tiny_model(11)];
    let data = ood_trials(3, 6);
    let report = loso_cv(&data, &models, &quick(), 0.5, 0).unwrap();
    assert_eq!(report.folds.len(), 3);
    for f in &report.folds {
        assert!(f.train_ids.iter().all(|id| !id.starts_with(&f.subject)));
        assert!(f.test_ids.iter().all(|id| id.starts_with(&f.subject)));
        assert_eq!(f.train_ids.len() + f.test_ids.len(), data.len());
    }
    let one = ood_trials(1, 6);
    assert!(matches!(loso_cv(&one, &models, &quick(), 0.5, 0), Err(Error::Protocol(_))));
}
