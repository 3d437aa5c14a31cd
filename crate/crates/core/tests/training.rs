use slicesort::data::{gen_multiset_majority, LabeledSequence, Rng};
use slicesort::training::{evaluate, train_loop, TrainConfig, TrainLog};
use slicesort::{AttentionKind, EncoderConfig, EncoderParams, Tensor};

fn small_config(attention: AttentionKind) -> EncoderConfig {
    EncoderConfig {
        attention,
        ..EncoderConfig::default()
    }
}

fn init(config: &EncoderConfig, seed: u64) -> EncoderParams<Tensor> {
    EncoderParams::init(config, &mut Rng::new(seed)).unwrap()
}

fn without_time(log: &TrainLog) -> Vec<(usize, u64, u64, Option<u64>)> {
    log.epochs
        .iter()
        .map(|e| (e.epoch, e.loss.to_bits(), e.train_acc.to_bits(), e.test_acc.map(f64::to_bits)))
        .collect()
}

#[test]
fn overfits_one_batch_of_eight() {
    for attention in [AttentionKind::SliceSort, AttentionKind::SoftmaxMha] {
        let config = small_config(attention);
        let data = gen_multiset_majority(21, 8, config.seq_len - 1, config.vocab, config.n_classes)
            .unwrap();
        let mut params = init(&config, 1);
        // One batch per epoch, so every epoch is one optimizer step.
        let train = TrainConfig {
            epochs: 200,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let log = train_loop(&config, &mut params, &train, &data, None).unwrap();
        let best = log.epochs.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
        assert!(best < 0.01, "{attention:?}: best loss {best}");
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let config = small_config(AttentionKind::SliceSort);
    let data = gen_multiset_majority(0, 4, config.seq_len - 1, config.vocab, config.n_classes).unwrap();
    let mut params = init(&config, 2);
    let before = params.clone();
    let train = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let log = train_loop(&config, &mut params, &train, &data, None).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(params, before);
}

#[test]
fn training_is_deterministic() {
    let config = EncoderConfig {
        seq_len: 16,
        ..small_config(AttentionKind::SliceSort)
    };
    let data = gen_multiset_majority(4, 40, 15, config.vocab, config.n_classes).unwrap();
    let test = gen_multiset_majority(5, 20, 15, config.vocab, config.n_classes).unwrap();
    let train = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = || {
        let mut params = init(&config, 3);
        let log = train_loop(&config, &mut params, &train, &data, Some(&test)).unwrap();
        (params, log)
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert_eq!(without_time(&l1), without_time(&l2));
    for (a, b) in p1.tensors().into_iter().zip(p2.tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn evaluate_leaves_params_untouched() {
    let config = small_config(AttentionKind::SoftmaxMha);
    let data = gen_multiset_majority(8, 10, config.seq_len - 1, config.vocab, config.n_classes).unwrap();
    let params = init(&config, 4);
    let before = params.clone();
    let acc = evaluate(&params, &config, &data).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(params, before);
}

#[test]
fn biased_classifier_scores_constant_labels() {
    let config = EncoderConfig {
        seq_len: 8,
        ..small_config(AttentionKind::SliceSort)
    };
    let mut params = init(&config, 5);
    params.classifier_w = Tensor::zeros(params.classifier_w.shape());
    params.classifier_b = Tensor::vector(vec![0.0, 0.0, 5.0, 0.0]);
    let data: Vec<LabeledSequence> = gen_multiset_majority(1, 30, 7, config.vocab, config.n_classes)
        .unwrap()
        .into_iter()
        .map(|s| LabeledSequence { label: 2, ..s })
        .collect();
    assert_eq!(evaluate(&params, &config, &data).unwrap(), 1.0);
}

#[test]
fn untrained_model_is_at_chance() {
    for attention in [AttentionKind::SliceSort, AttentionKind::SoftmaxMha] {
        let config = EncoderConfig {
            vocab: 10,
            n_classes: 10,
            seq_len: 16,
            ..small_config(attention)
        };
        // Balanced labels independent of the tokens: any fixed predictor is right
        // with probability 1/10 per sample, so accuracy is binomial around 0.10.
        let data: Vec<LabeledSequence> = gen_multiset_majority(12, 1000, 15, 10, 10)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| LabeledSequence { label: i % 10, ..s })
            .collect();
        let acc = evaluate(&init(&config, 6), &config, &data).unwrap();
        assert!((acc - 0.10).abs() <= 0.05, "{attention:?}: accuracy {acc}");
    }
}
