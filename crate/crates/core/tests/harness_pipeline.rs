//! End-to-end behavior of the training loops: optimizer edge cases,
//! resume reproducibility, objective equivalences, and the frozen-encoder
//! contract of probing.

use smoothcert_core::harness::{
    make_synthetic, run_finetune, run_pretrain, run_probe, save_dataset, Checkpoint, Dataset,
    RunConfig,
};
use std::path::Path;

fn write_split(dir: &Path, seed: u64, n: usize) -> std::path::PathBuf {
    let ds = make_synthetic(seed, n, 8, 2).unwrap();
    let path = dir.join("data.scds");
    save_dataset(&ds, &path).unwrap();
    path
}

fn tiny_toml(train: &Path) -> String {
    format!(
        r#"
seed = 3
[model]
patch_size = 2
image_channels = 1
image_height = 8
image_width = 8
enc_dim = 8
enc_depth = 1
enc_heads = 2
dec_dim = 8
dec_depth = 1
dec_heads = 2
num_classes = 2
use_class_token = false

[corruption]
sigma = 0.25
mask_ratio = 0.5
patch_size = 2

[data]
train = "{train}"

[optimizer]
base_lr = 1e-3
epochs = 2
batch_size = 8
warmup_epochs = 0

[objective]
kind = "rs"
sigma = 0.25
"#,
        train = train.display()
    )
}

#[test]
fn zero_lr_pretraining_leaves_params_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 50, 8);
    let mut cfg = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    cfg.out_dir = Some(dir.path().join("out"));
    let opt = cfg.optimizer.as_mut().unwrap();
    opt.base_lr = 0.0;
    opt.epochs = 1;

    let ckpt = run_pretrain(&cfg).unwrap();
    let trained = ckpt.to_params().unwrap();
    let initial = smoothcert_core::model::ModelParams::<f32>::init(
        &cfg.model,
        &mut smoothcert_core::numerics::RngStream::derive(cfg.seed, &[1]),
    )
    .unwrap();
    assert_eq!(trained, initial, "lr = 0 must not move parameters");
}

#[test]
fn pretraining_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 51, 64);
    let mut cfg = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    cfg.out_dir = Some(dir.path().join("out"));
    cfg.optimizer.as_mut().unwrap().epochs = 12;

    let ckpt = run_pretrain(&cfg).unwrap();
    let history = &ckpt.meta.loss_history;
    assert!(
        history.last().unwrap() < history.first().unwrap(),
        "no descent: {history:?}"
    );
}

#[test]
fn resumed_pretraining_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 52, 16);

    // uninterrupted: 4 epochs
    let mut full = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    full.out_dir = Some(dir.path().join("full"));
    full.optimizer.as_mut().unwrap().epochs = 4;
    let full_ckpt = run_pretrain(&full).unwrap();

    // resume from the epoch-2 checkpoint under the same schedule
    let mut second = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    second.out_dir = Some(dir.path().join("resumed"));
    second.optimizer.as_mut().unwrap().epochs = 4;
    second.init_from = Some(dir.path().join("full/pretrain_epoch_0002.ckpt"));
    second.resume = true;
    let resumed_ckpt = run_pretrain(&second).unwrap();

    // loss of the epoch after the resume point matches to well below 1e-6
    let full_l3 = full_ckpt.meta.loss_history[2];
    let res_l3 = resumed_ckpt.meta.loss_history[2];
    assert!(
        (full_l3 - res_l3).abs() < 1e-6,
        "post-resume loss diverged: {full_l3} vs {res_l3}"
    );
    // and the final parameters are bit-identical
    let a = Checkpoint::load(&dir.path().join("full/pretrain_final.ckpt")).unwrap();
    let b = Checkpoint::load(&dir.path().join("resumed/pretrain_final.ckpt")).unwrap();
    for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "tensor {na} differs after resume");
    }
}

#[test]
fn continued_pretraining_restarts_schedule() {
    // init_from without resume = fresh optimizer on a warm start
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 53, 16);
    let mut cfg = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    cfg.out_dir = Some(dir.path().join("a"));
    let first = run_pretrain(&cfg).unwrap();

    let mut cont = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    cont.out_dir = Some(dir.path().join("b"));
    cont.init_from = Some(dir.path().join("a/pretrain_final.ckpt"));
    let second = run_pretrain(&cont).unwrap();
    assert_eq!(second.meta.loss_history.len(), 2, "fresh epoch counter");
    assert!(
        second.meta.loss_history.last().unwrap() <= first.meta.loss_history.last().unwrap(),
        "continued pre-training regressed"
    );
}

#[test]
fn rs_and_zeroed_consistency_produce_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 54, 16);

    let run = |objective: &str, out: &str| {
        let toml = tiny_toml(&train).replace(
            "[objective]\nkind = \"rs\"\nsigma = 0.25",
            &format!("[objective]\n{objective}"),
        );
        let mut cfg = RunConfig::from_toml(&toml).unwrap();
        cfg.out_dir = Some(dir.path().join(out));
        cfg.from_scratch = true;
        cfg.optimizer.as_mut().unwrap().epochs = 2;
        run_finetune(&cfg).unwrap()
    };

    let rs = run("kind = \"rs\"\nsigma = 0.25", "rs");
    let cons = run(
        "kind = \"consistency\"\nlambda = 0.0\nmu = 0.0\nm = 1\nsigma = 0.25",
        "cons",
    );
    assert_eq!(rs.meta.loss_history, cons.meta.loss_history);
    for ((na, ta), (nb, tb)) in rs.tensors.iter().zip(&cons.tensors) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "parameter trajectories diverged at {na}");
    }
}

#[test]
fn finetune_discards_decoder_and_adds_class_token() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 55, 16);
    let mut pre = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    pre.out_dir = Some(dir.path().join("pre"));
    run_pretrain(&pre).unwrap();

    let toml = tiny_toml(&train).replace("use_class_token = false", "use_class_token = true");
    let mut ft = RunConfig::from_toml(&toml).unwrap();
    ft.out_dir = Some(dir.path().join("ft"));
    ft.init_from = Some(dir.path().join("pre/pretrain_final.ckpt"));
    let ckpt = run_finetune(&ft).unwrap();
    let names: Vec<&str> = ckpt.tensors.iter().map(|(n, _)| n.as_str()).collect();
    assert!(!names.iter().any(|n| n.starts_with("dec")), "decoder kept: {names:?}");
    assert!(names.contains(&"cls_token"));

    let params = ckpt.to_params().unwrap();
    assert!(params.decoder.is_none());
}

#[test]
fn probe_freezes_encoder_and_zero_epochs_keeps_head() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 56, 32);
    let mut pre = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    pre.out_dir = Some(dir.path().join("pre"));
    run_pretrain(&pre).unwrap();
    let pre_ckpt = Checkpoint::load(&dir.path().join("pre/pretrain_final.ckpt")).unwrap();

    let mut probe = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    probe.out_dir = Some(dir.path().join("probe"));
    probe.init_from = Some(dir.path().join("pre/pretrain_final.ckpt"));
    probe.optimizer.as_mut().unwrap().epochs = 3;
    let probed = run_probe(&probe).unwrap();

    // every encoder tensor is bit-identical to the pre-trained one
    let before: std::collections::BTreeMap<&str, _> = pre_ckpt
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    for (name, tensor) in &probed.tensors {
        if name.starts_with("enc") || name.starts_with("patch_embed") {
            assert_eq!(
                Some(tensor),
                before.get(name.as_str()).copied(),
                "encoder tensor {name} changed during probing"
            );
        }
    }
    // feature normalization exists on the probed model
    assert!(probed.tensors.iter().any(|(n, _)| n == "head_norm.mean"));

    // zero-epoch probe leaves the head at initialization
    let mut zero = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    zero.out_dir = Some(dir.path().join("probe0"));
    zero.init_from = Some(dir.path().join("pre/pretrain_final.ckpt"));
    zero.optimizer.as_mut().unwrap().epochs = 0;
    let zeroed = run_probe(&zero).unwrap();
    let head_before = pre_ckpt.tensors.iter().find(|(n, _)| n == "head.w").unwrap();
    let head_after = zeroed.tensors.iter().find(|(n, _)| n == "head.w").unwrap();
    assert_eq!(head_before.1, head_after.1);
}

#[test]
fn finetune_improves_on_frozen_pretrained_head() {
    // fine-tuned noisy-input accuracy beats the untrained head's
    let dir = tempfile::tempdir().unwrap();
    let ds = make_synthetic(57, 96, 8, 2).unwrap();
    let train = Dataset {
        images: ds.images[..64].to_vec(),
        labels: ds.labels[..64].to_vec(),
        num_classes: 2,
    };
    let held = Dataset {
        images: ds.images[64..].to_vec(),
        labels: ds.labels[64..].to_vec(),
        num_classes: 2,
    };
    let train_path = dir.path().join("data.scds");
    save_dataset(&train, &train_path).unwrap();

    let mut pre = RunConfig::from_toml(&tiny_toml(&train_path)).unwrap();
    pre.out_dir = Some(dir.path().join("pre"));
    pre.optimizer.as_mut().unwrap().epochs = 4;
    let pre_ckpt = run_pretrain(&pre).unwrap();

    let mut ft = RunConfig::from_toml(&tiny_toml(&train_path)).unwrap();
    ft.out_dir = Some(dir.path().join("ft"));
    ft.init_from = Some(dir.path().join("pre/pretrain_final.ckpt"));
    ft.optimizer.as_mut().unwrap().epochs = 10;
    let ft_ckpt = run_finetune(&ft).unwrap();

    let noisy_acc = |params: &smoothcert_core::model::ModelParams<f32>| {
        let mut session = smoothcert_core::model::InferenceSession::new(params);
        let mut rng = smoothcert_core::numerics::RngStream::new(99, 0);
        let correct = held
            .images
            .iter()
            .zip(&held.labels)
            .filter(|(im, &l)| {
                let noisy = im.add_gaussian_noise(&mut rng, 0.25);
                session.classify_argmax(&noisy).unwrap() == l
            })
            .count();
        correct as f64 / held.len() as f64
    };

    let mut zero_shot = pre_ckpt.to_params().unwrap();
    zero_shot.discard_decoder();
    let tuned = ft_ckpt.to_params().unwrap();
    let (base, after) = (noisy_acc(&zero_shot), noisy_acc(&tuned));
    assert!(
        after > base,
        "fine-tuning did not improve noisy accuracy: {base} -> {after}"
    );
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_split(dir.path(), 58, 8);
    let mut cfg = RunConfig::from_toml(&tiny_toml(&train)).unwrap();
    cfg.out_dir = Some(dir.path().join("out"));
    // finetune without init_from and without from_scratch
    let err = run_finetune(&cfg).unwrap_err();
    assert!(matches!(err, smoothcert_core::Error::Config(_)), "{err}");
}
