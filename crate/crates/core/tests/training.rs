mod common;

use common::{brightness_pairs, small_config, small_vgg, toy_pairs, tree_digest};
use dped::error::Error;
use dped::losses::{EvalCounters, LossProfile};
use dped::nets::ParamKind;
use dped::train::{self, checkpoint, TrainState};

const SIDE: usize = 32;

#[test]
fn mse_profile_never_touches_perceptual_terms() {
    let data = toy_pairs(8, SIDE, 1);
    let mut cfg = small_config(SIDE, LossProfile::Mse);
    cfg.iterations = 3;
    let dir = tempfile::tempdir().unwrap();
    let out = train::train(&data, &cfg, None, dir.path()).unwrap();
    assert_eq!(
        out.state.counters,
        EvalCounters {
            mse: 3,
            ..Default::default()
        }
    );
    // No texture term, so no discriminator pretraining either.
    assert_eq!(out.pretrain_accuracy, None);
    let log = train::read_log(&dir.path().join(train::LOG_FILE)).unwrap();
    assert!(log.iter().all(|r| r.content == 0.0 && r.texture == 0.0 && r.color == 0.0 && r.tv == 0.0));
    assert!(log.iter().all(|r| r.total == r.mse));
}

#[test]
fn full_profile_counts_every_term_once_per_step() {
    let data = toy_pairs(8, SIDE, 2);
    let mut cfg = small_config(SIDE, LossProfile::Full);
    cfg.iterations = 2;
    let vgg = small_vgg(1);
    let dir = tempfile::tempdir().unwrap();
    let out = train::train(&data, &cfg, Some(&vgg), dir.path()).unwrap();
    let c = out.state.counters;
    assert_eq!((c.content, c.texture, c.color, c.tv, c.mse), (2, 2, 2, 2, 0));
    assert!(out.pretrain_accuracy.is_some());
}

#[test]
fn content_profiles_need_vgg_weights() {
    let data = toy_pairs(8, SIDE, 3);
    let dir = tempfile::tempdir().unwrap();
    for profile in [LossProfile::Full, LossProfile::ContentTexture] {
        let err = train::train(&data, &small_config(SIDE, profile), None, dir.path()).err().unwrap();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}

#[test]
fn zero_learning_rate_freezes_trainable_weights() {
    let data = toy_pairs(8, SIDE, 4);
    let mut cfg = small_config(SIDE, LossProfile::MseTexture);
    cfg.lr = 0.0;
    cfg.iterations = 2;
    let dir = tempfile::tempdir().unwrap();
    let out = train::train(&data, &cfg, None, dir.path()).unwrap();
    let fresh = TrainState::new(&cfg);
    for (a, b) in out.state.generator.params().iter().zip(fresh.generator.params().iter()) {
        if a.kind == ParamKind::Trainable {
            assert_eq!(a.data, b.data, "{}", a.name);
        }
    }
}

#[test]
fn one_iteration_writes_one_log_row_and_a_checkpoint() {
    let data = toy_pairs(8, SIDE, 5);
    let mut cfg = small_config(SIDE, LossProfile::Mse);
    cfg.iterations = 1;
    cfg.batch_size = 2;
    let dir = tempfile::tempdir().unwrap();
    let out = train::train(&data, &cfg, None, dir.path()).unwrap();
    assert_eq!(train::read_log(&dir.path().join(train::LOG_FILE)).unwrap().len(), 1);
    assert_eq!(out.checkpoint, train::checkpoint_path(dir.path(), 1));
    let m = checkpoint::read_manifest(&out.checkpoint).unwrap();
    assert_eq!(m.iter, 1);
    assert_eq!(checkpoint::read_config(&out.checkpoint).unwrap(), cfg);
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let data = toy_pairs(8, SIDE, 6);
    let mut cfg = small_config(SIDE, LossProfile::Full);
    cfg.iterations = 4;
    let vgg = small_vgg(2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train::train(&data, &cfg, Some(&vgg), a.path()).unwrap();
    let rb = train::train(&data, &cfg, Some(&vgg), b.path()).unwrap();
    assert_eq!(tree_digest(&ra.checkpoint), tree_digest(&rb.checkpoint));
    let strip = |p: &std::path::Path| {
        train::read_log(&p.join(train::LOG_FILE))
            .unwrap()
            .into_iter()
            .map(|r| (r.iter, r.total.to_bits(), r.d_loss.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(a.path()), strip(b.path()));

    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    let rc = train::train(&data, &other, Some(&vgg), c.path()).unwrap();
    assert_ne!(
        tree_digest(&ra.checkpoint).get("generator.dpedw"),
        tree_digest(&rc.checkpoint).get("generator.dpedw")
    );
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let data = toy_pairs(8, SIDE, 7);
    let mut cfg = small_config(SIDE, LossProfile::Full);
    cfg.iterations = 6;
    cfg.checkpoint_every = 3;
    let vgg = small_vgg(3);
    let whole = tempfile::tempdir().unwrap();
    let full = train::train(&data, &cfg, Some(&vgg), whole.path()).unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.iterations = 3;
    let half = train::train(&data, &first, Some(&vgg), part.path()).unwrap();
    assert_eq!(half.checkpoint, train::checkpoint_path(part.path(), 3));
    let resumed = train::resume(&half.checkpoint, &data, &cfg, Some(&vgg), part.path()).unwrap();
    assert_eq!(resumed.state.iter, 6);
    assert_eq!(tree_digest(&full.checkpoint), tree_digest(&resumed.checkpoint));
    let log = train::read_log(&part.path().join(train::LOG_FILE)).unwrap();
    assert_eq!(log.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let data = toy_pairs(8, SIDE, 8);
    let mut cfg = small_config(SIDE, LossProfile::Mse);
    cfg.iterations = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = train::train(&data, &cfg, None, dir.path()).unwrap();
    let mut changed = cfg.clone();
    changed.lr *= 2.0;
    let err = train::resume(&out.checkpoint, &data, &changed, None, dir.path()).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn discriminator_pretraining_separates_brightness() {
    let data = brightness_pairs(8, SIDE, 9);
    let mut cfg = small_config(SIDE, LossProfile::MseTexture);
    cfg.pretrain_iters = 60;
    let mut state = TrainState::new(&cfg);
    let acc = train::pretrain_discriminator(&mut state, &data, &cfg).unwrap().unwrap();
    assert!(acc > 0.9, "accuracy {acc}");
}

#[test]
fn non_finite_inputs_abort_with_a_divergence_dump() {
    let mut data = toy_pairs(8, SIDE, 10);
    for p in &mut data {
        p.source = p.source.map(|_| f32::NAN);
    }
    let mut cfg = small_config(SIDE, LossProfile::Mse);
    cfg.iterations = 2;
    let dir = tempfile::tempdir().unwrap();
    let err = train::train(&data, &cfg, None, dir.path()).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_)), "{err}");
    assert!(dir.path().join(train::DIVERGENCE_FILE).exists());
}

#[test]
fn too_few_pairs_for_a_batch() {
    let data = toy_pairs(2, SIDE, 11);
    let dir = tempfile::tempdir().unwrap();
    let err = train::train(&data, &small_config(SIDE, LossProfile::Mse), None, dir.path()).err().unwrap();
    assert!(matches!(err, Error::EmptyDataset(_)), "{err}");
}
