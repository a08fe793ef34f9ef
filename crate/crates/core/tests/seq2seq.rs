mod common;

use fac_core::corpus::Split;
use fac_core::features::MelConfig;
use fac_core::nn::{check_gradients, perturb, Checkpoint, TransferAction};
use fac_core::pipelines::speech_pairs;
use fac_core::seq2seq::*;
use fac_core::{Error, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn micro() -> Seq2seqConfig {
    Seq2seqConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        ffn_dim: 12,
        prenet_dim: 6,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn gradients_match_finite_differences() {
    let pair = TrainingPair {
        input: random(6, 5, 1),
        target: random(7, 4, 2),
    };
    let mut model = Seq2seqModel::new(&micro(), 5, 4).unwrap();
    perturb(&mut model.params, 0.05, 4);
    let (_, grads) = model.loss_and_gradients(&pair, 5.0).unwrap();
    let loss = |m: &Seq2seqModel| {
        m.teacher_forced_loss(std::slice::from_ref(&pair), 5.0)
            .unwrap()
            .total()
    };
    let samples = check_gradients(&mut model, |m| &mut m.params, loss, &grads, 20, 1e-6, 11);
    assert_eq!(samples.len(), 20);
    for s in &samples {
        assert!(s.relative_error() < 1e-3, "{s:?}");
    }
}

#[test]
fn zero_steps_and_determinism() {
    let pairs: Vec<_> = (0..3)
        .map(|i| TrainingPair {
            input: random(5 + i, 4, i as u64),
            target: random(6 + i, 3, 10 + i as u64),
        })
        .collect();
    let mcfg = micro();
    let zero = Seq2seqTrainConfig {
        steps: 0,
        ..Default::default()
    };
    let trained = train_seq2seq(&pairs, &mcfg, &zero, None).unwrap();
    assert_eq!(trained.model, initial_model(&pairs, &mcfg, &zero).unwrap());
    assert!(trained.log.is_empty());

    let tcfg = Seq2seqTrainConfig {
        steps: 15,
        ..Default::default()
    };
    let a = train_seq2seq(&pairs, &mcfg, &tcfg, None).unwrap();
    let b = train_seq2seq(&pairs, &mcfg, &tcfg, None).unwrap();
    assert_eq!(a.model.parameter_hash(), b.model.parameter_hash());
    assert_eq!(a.log.len(), 15);
    assert_ne!(a.model.parameter_hash(), trained.model.parameter_hash());
}

#[test]
fn inconsistent_pairs_are_rejected() {
    let pairs = vec![
        TrainingPair {
            input: random(4, 3, 0),
            target: random(4, 2, 1),
        },
        TrainingPair {
            input: random(4, 5, 2),
            target: random(4, 2, 3),
        },
    ];
    let err = train_seq2seq(&pairs, &micro(), &Seq2seqTrainConfig::default(), None).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch(_)));
    assert!(train_seq2seq(&[], &micro(), &Seq2seqTrainConfig::default(), None).is_err());
}

#[test]
fn pretrained_transfer_rules() {
    let cfg = micro();
    let model = Seq2seqModel::new(&cfg, 80, 80).unwrap();
    let donor = Seq2seqModel::new(
        &Seq2seqConfig {
            seed: 99,
            ..cfg.clone()
        },
        80,
        80,
    )
    .unwrap();
    let (full, report) = load_pretrained(&model, &donor.to_checkpoint().unwrap());
    assert_eq!(report.copied(), model.params.len());
    assert_eq!(full.params, donor.params);

    // a text model: 40-symbol one-hot input instead of 80 mel bins
    let tts = Seq2seqModel::new(
        &Seq2seqConfig {
            seed: 5,
            ..cfg.clone()
        },
        40,
        80,
    )
    .unwrap();
    let (_, report) = load_pretrained(&model, &tts.to_checkpoint().unwrap());
    let skipped = report.skipped();
    assert!(skipped.contains(&"encoder.input.weight"), "{skipped:?}");
    assert!(
        skipped
            .iter()
            .all(|n| n.starts_with("encoder.input") || n.starts_with("copy.output")),
        "{skipped:?}"
    );
    assert!(report
        .0
        .iter()
        .all(|e| e.action != TransferAction::SkippedMissing));
    let json = serde_json::to_value(&report).unwrap();
    let input = json
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["name"] == "encoder.input.weight")
        .unwrap();
    assert_eq!(input["action"], "skipped_shape");

    let (same, report) = load_pretrained(&model, &Checkpoint::empty());
    assert_eq!(report.copied(), 0);
    assert_eq!(
        report.count(TransferAction::SkippedMissing),
        model.params.len()
    );
    assert_eq!(same.params, model.params);

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&bad).is_err());
    assert!(Checkpoint::load(&tmp.path().join("missing.ckpt")).is_err());
}

#[test]
fn pretrained_initialization_is_used_in_training() {
    let pairs = vec![TrainingPair {
        input: random(5, 4, 0),
        target: random(5, 4, 1),
    }];
    let cfg = micro();
    let donor = Seq2seqModel::new(
        &Seq2seqConfig {
            seed: 42,
            ..cfg.clone()
        },
        4,
        4,
    )
    .unwrap();
    let zero = Seq2seqTrainConfig {
        steps: 0,
        normalize: false,
        ..Default::default()
    };
    let t = train_seq2seq(&pairs, &cfg, &zero, Some(&donor.to_checkpoint().unwrap())).unwrap();
    assert_eq!(t.model.params, donor.params);
    assert_eq!(t.transfer.unwrap().copied(), donor.params.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoding_respects_cap_and_width(frames in 1usize..8, cap in 1usize..12, threshold in 0.0f64..1.0, seed in 0u64..1000) {
        let model = Seq2seqModel::new(&Seq2seqConfig { seed, ..micro() }, 3, 2).unwrap();
        let d = model.infer_ar(&random(frames, 3, seed), cap, threshold).unwrap();
        prop_assert!(d.output.rows() <= cap);
        prop_assert!(d.output.rows() >= 1);
        prop_assert_eq!(d.output.cols(), 2);
        prop_assert!(d.stopped_naturally || d.output.rows() == cap);
    }
}

#[test]
fn one_frame_cap_reports_stop_flag() {
    let model = Seq2seqModel::new(&micro(), 3, 2).unwrap();
    let d = model.infer_ar(&random(4, 3, 0), 1, 0.5).unwrap();
    assert_eq!(d.output.rows(), 1);
    assert_eq!(d.stopped_naturally, d.stop_probs[0] > 0.5);
    let z = model.infer_ar(&random(4, 3, 0), 10, 0.0).unwrap();
    assert_eq!(z.output.rows(), 1);
    assert!(z.stopped_naturally);
}

#[test]
fn toy_overfit_run() {
    let (_, corpus) = common::toy_split();
    let pairs = speech_pairs(&corpus, Split::Train, &MelConfig::default()).unwrap();
    let mcfg = Seq2seqConfig::default();
    let tcfg = Seq2seqTrainConfig::default();
    let fixed = &pairs[..4];
    let init = initial_model(&pairs, &mcfg, &tcfg).unwrap();
    let l0 = init
        .teacher_forced_loss(&pairs, tcfg.stop_pos_weight)
        .unwrap();
    let mut checkpoints = vec![init
        .teacher_forced_loss(fixed, tcfg.stop_pos_weight)
        .unwrap()
        .total()];
    let trained = train_seq2seq_with(&pairs, &mcfg, &tcfg, None, &mut |m, s| {
        if (s.step + 1) % 100 == 0 {
            checkpoints.push(
                m.teacher_forced_loss(fixed, tcfg.stop_pos_weight)
                    .unwrap()
                    .total(),
            );
        }
    })
    .unwrap();
    let model = trained.model;
    let l1 = model
        .teacher_forced_loss(&pairs, tcfg.stop_pos_weight)
        .unwrap();
    assert!(
        l1.l1 < 0.1 * l0.l1,
        "teacher-forced L1 {} vs initial {}",
        l1.l1,
        l0.l1
    );

    let windows = checkpoints.len() - 1;
    let rising = checkpoints.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(
        rising as f64 <= 0.05 * windows as f64,
        "{rising}/{windows} rising windows: {checkpoints:?}"
    );

    let mut close = 0;
    for p in &pairs {
        let d = model
            .infer_ar(&p.input, 4 * p.input.rows(), DEFAULT_STOP_THRESHOLD)
            .unwrap();
        let err = model
            .output_stats
            .normalize(&d.output)
            .mean_abs_diff(&model.output_stats.normalize(&p.target));
        if d.stopped_naturally && err < 0.15 {
            close += 1;
        }
    }
    assert!(
        close * 10 >= pairs.len() * 9,
        "{close}/{} training inputs decoded within 0.15",
        pairs.len()
    );
}
