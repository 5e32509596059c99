//! Scratch calibration run for the desk-scale experiments (temporary).

use smoothcert_core::harness::{
    certified_accuracy, make_synthetic, run_certify, run_finetune, run_pretrain, run_probe,
    save_dataset, Checkpoint, CheckpointMeta, RunConfig,
};
use smoothcert_core::model::{InferenceSession, ModelParams};
use smoothcert_core::numerics::RngStream;
use std::path::Path;

fn base_toml(train: &Path, test: &Path) -> String {
    format!(
        r#"
seed = 0
[model]
patch_size = 4
image_channels = 1
image_height = 16
image_width = 16
enc_dim = 32
enc_depth = 2
enc_heads = 4
dec_dim = 16
dec_depth = 1
dec_heads = 2
num_classes = 2
use_class_token = false

[corruption]
sigma = 0.25
mask_ratio = 0.75
patch_size = 4

[data]
train = "{train}"
test = "{test}"

[optimizer]
base_lr = 1e-3
epochs = 20
batch_size = 32
warmup_epochs = 2

[objective]
kind = "rs"
sigma = 0.25

[certify]
sigma = 0.25
n = 600
n0 = 40
alpha = 0.01
batch = 64
"#,
        train = train.display(),
        test = test.display()
    )
}

fn clean_accuracy(params: &ModelParams<f32>, ds: &smoothcert_core::harness::Dataset) -> f64 {
    let mut session = InferenceSession::new(params);
    let correct = ds
        .images
        .iter()
        .zip(&ds.labels)
        .filter(|(im, &l)| session.classify_argmax(im).unwrap() == l)
        .count();
    correct as f64 / ds.len() as f64
}

#[test]
#[ignore]
fn calibrate() {
    let t0 = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let all = make_synthetic(1234, 768, 16, 2).unwrap();
    let train = smoothcert_core::harness::Dataset {
        images: all.images[..512].to_vec(),
        labels: all.labels[..512].to_vec(),
        num_classes: 2,
    };
    let test = smoothcert_core::harness::Dataset {
        images: all.images[512..].to_vec(),
        labels: all.labels[512..].to_vec(),
        num_classes: 2,
    };
    let train_path = dir.path().join("train.scds");
    let test_path = dir.path().join("test.scds");
    save_dataset(&train, &train_path).unwrap();
    save_dataset(&test, &test_path).unwrap();

    let toml = base_toml(&train_path, &test_path);
    let seed = 1000u64;

    // ---- pretrain
    let mut cfg = RunConfig::from_toml(&toml).unwrap();
    cfg.seed = seed;
    cfg.out_dir = Some(dir.path().join("pre"));
    let pre = run_pretrain(&cfg).unwrap();
    println!(
        "[{:.1?}] pretrain loss: first {:.5} last {:.5}",
        t0.elapsed(),
        pre.meta.loss_history.first().unwrap(),
        pre.meta.loss_history.last().unwrap()
    );
    let pre_path = dir.path().join("pre/pretrain_final.ckpt");

    // random-init encoder checkpoint for the baseline probe
    let rand_params =
        ModelParams::<f32>::init(&cfg.model, &mut RngStream::derive(seed, &[1])).unwrap();
    let rand_ckpt = Checkpoint::from_params(
        &rand_params,
        CheckpointMeta {
            format_version: 1,
            model: cfg.model.clone(),
            epoch: 0,
            seed,
            loss_history: vec![],
            opt_step: None,
        },
    );
    let rand_path = dir.path().join("random.ckpt");
    rand_ckpt.save(&rand_path).unwrap();

    // ---- probes
    for (name, init) in [("dmae", &pre_path), ("random", &rand_path)] {
        let mut pcfg = RunConfig::from_toml(&toml).unwrap();
        pcfg.seed = seed + 7;
        pcfg.out_dir = Some(dir.path().join(format!("probe_{name}")));
        pcfg.init_from = Some(init.clone());
        let opt = pcfg.optimizer.as_mut().unwrap();
        opt.base_lr = 0.01;
        opt.epochs = 20;
        opt.batch_size = 64;
        opt.warmup_epochs = 1;
        opt.beta2 = 0.999;
        opt.weight_decay = 0.0;
        let probe = run_probe(&pcfg).unwrap();
        let params = probe.to_params().unwrap();
        println!(
            "[{:.1?}] probe {name}: loss first {:.4} last {:.4}, clean test acc {:.3}",
            t0.elapsed(),
            probe.meta.loss_history.first().unwrap(),
            probe.meta.loss_history.last().unwrap(),
            clean_accuracy(&params, &test)
        );

        let mut ccfg = RunConfig::from_toml(&toml).unwrap();
        ccfg.seed = seed + 13;
        ccfg.out_dir = Some(dir.path().join(format!("cert_probe_{name}")));
        ccfg.init_from = Some(dir.path().join(format!("probe_{name}/probe_final.ckpt")));
        let results = run_certify(&ccfg).unwrap();
        let table = certified_accuracy(&results, &[0.0, 0.125, 0.25, 0.5], 0.25).unwrap();
        println!(
            "[{:.1?}] certified acc probe {name}: r0={:.3} r.125={:.3} r.25={:.3} r.5={:.3}",
            t0.elapsed(),
            table.accuracy[0],
            table.accuracy[1],
            table.accuracy[2],
            table.accuracy[3]
        );
    }

    // ---- finetunes (CR vs RS) at several training budgets
    for epochs in [3usize, 5, 8] {
        for (name, obj) in [
            ("cr", "kind = \"consistency\"\nlambda = 2.0\nmu = 0.5\nm = 2\nsigma = 0.25"),
            ("rs", "kind = \"rs\"\nsigma = 0.25"),
        ] {
            let ft_toml = toml.replace(
                "[objective]\nkind = \"rs\"\nsigma = 0.25",
                &format!("[objective]\n{obj}"),
            );
            let mut fcfg = RunConfig::from_toml(&ft_toml).unwrap();
            fcfg.seed = seed + 21;
            fcfg.out_dir = Some(dir.path().join(format!("ft_{name}_{epochs}")));
            fcfg.init_from = Some(pre_path.clone());
            let opt = fcfg.optimizer.as_mut().unwrap();
            opt.base_lr = 3e-3;
            opt.epochs = epochs;
            opt.batch_size = 32;
            opt.warmup_epochs = 1;
            opt.beta2 = 0.999;
            opt.layerwise_decay = 0.75;
            let ft = run_finetune(&fcfg).unwrap();
            let params = ft.to_params().unwrap();
            println!(
                "[{:.1?}] finetune {name} e{epochs}: loss last {:.4}, clean test acc {:.3}",
                t0.elapsed(),
                ft.meta.loss_history.last().unwrap(),
                clean_accuracy(&params, &test)
            );

            let mut ccfg = RunConfig::from_toml(&ft_toml).unwrap();
            ccfg.seed = seed + 27;
            ccfg.out_dir = Some(dir.path().join(format!("cert_ft_{name}_{epochs}")));
            ccfg.init_from =
                Some(dir.path().join(format!("ft_{name}_{epochs}/finetune_final.ckpt")));
            let results = run_certify(&ccfg).unwrap();
            let table =
                certified_accuracy(&results, &[0.125, 0.25, 0.375, 0.5], 0.25).unwrap();
            println!(
                "[{:.1?}] certified ft {name} e{epochs}: r.125={:.3} r.25={:.3} r.375={:.3} r.5={:.3}",
                t0.elapsed(),
                table.accuracy[0],
                table.accuracy[1],
                table.accuracy[2],
                table.accuracy[3]
            );
        }
    }
}
