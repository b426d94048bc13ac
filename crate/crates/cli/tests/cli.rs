use std::path::Path;

use sdci::config::preset;
use sdci::evaluation::MetricReport;
use sdci::sim::SplitSizes;
use sdci_cli::run;

fn sdci(args: &[&str]) -> i32 {
    run(std::iter::once("sdci").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, name: &str) -> std::path::PathBuf {
    let mut exp = preset(name).unwrap();
    exp.data.sizes = SplitSizes {
        train: 12,
        valid: 6,
        test: 6,
    };
    exp.data.num_steps = exp.data.num_steps.min(12);
    exp.model.hidden = 8;
    exp.model.decoder_hidden = 8;
    exp.train.epochs = 4;
    exp.train.batch_size = 6;
    exp.train.validate_every = 2;
    exp.train.checkpoint_every = 2;
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, exp.to_json()).unwrap();
    path
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "linear-k2");
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    assert_eq!(sdci(&["gen", "--config", p(&cfg), "--out", p(&data)]), 0);
    assert_eq!(
        sdci(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&run_dir)
        ]),
        0
    );
    for f in [
        "config.json",
        "metrics.jsonl",
        "final.ckpt",
        "last.ckpt",
        "epoch_0002.ckpt",
    ] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"train\"")).count(), 4);
    assert_eq!(log.lines().filter(|l| l.contains("\"valid\"")).count(), 2);

    let metrics = dir.path().join("m.json");
    let ckpt = run_dir.join("final.ckpt");
    assert_eq!(
        sdci(&[
            "eval",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&data),
            "--split",
            "test",
            "--out",
            p(&metrics)
        ]),
        0
    );
    let report: MetricReport =
        serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(report.label, "run");
    assert_eq!(report.num_samples, 6);
    assert!(report.world_param_distance.is_some());
    assert_eq!(sdci(&["report", "--in", p(&metrics), p(&metrics)]), 0);
}

#[test]
fn generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "springs-wall");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(sdci(&["gen", "--config", p(&cfg), "--out", p(&a)]), 0);
    assert_eq!(sdci(&["gen", "--config", p(&cfg), "--out", p(&b)]), 0);
    for f in ["manifest.json", "train.bin", "valid.bin", "test.bin"] {
        assert!(
            std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "linear-k1");
    let data = dir.path().join("data");
    assert_eq!(sdci(&["gen", "--config", p(&cfg), "--out", p(&data)]), 0);
    let straight = dir.path().join("straight");
    assert_eq!(
        sdci(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&straight)
        ]),
        0
    );

    let resumed = dir.path().join("resumed");
    let mid = straight.join("epoch_0002.ckpt");
    assert_eq!(
        sdci(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&resumed),
            "--resume",
            p(&mid)
        ]),
        0
    );
    let a = std::fs::read(straight.join("final.ckpt")).unwrap();
    let b = std::fs::read(resumed.join("final.ckpt")).unwrap();
    assert!(a == b, "resumed checkpoint differs");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sdci(&["frobnicate"]), 2);
    assert_eq!(sdci(&[]), 2);
    assert_eq!(sdci(&["gen", "--out", "x"]), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x"}"#).unwrap();
    assert_eq!(
        sdci(&[
            "gen",
            "--config",
            p(&bad),
            "--out",
            p(&dir.path().join("o"))
        ]),
        2
    );

    let mut wrong =
        serde_json::from_str::<serde_json::Value>(&preset("linear-k1").unwrap().to_json()).unwrap();
    wrong["train"]["batch_size"] = 0.into();
    let wrong_path = dir.path().join("wrong.json");
    std::fs::write(&wrong_path, wrong.to_string()).unwrap();
    assert_eq!(
        sdci(&[
            "gen",
            "--config",
            p(&wrong_path),
            "--out",
            p(&dir.path().join("o"))
        ]),
        2
    );

    let cfg = tiny_config(dir.path(), "linear-k1");
    let missing = dir.path().join("no-such-data");
    assert_eq!(
        sdci(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&missing),
            "--out",
            p(&dir.path().join("r"))
        ]),
        1
    );
    assert_eq!(
        sdci(&[
            "gen",
            "--config",
            p(&dir.path().join("absent.json")),
            "--out",
            "o"
        ]),
        1
    );
    assert_eq!(sdci(&["report", "--in", p(&cfg)]), 1);

    let data = dir.path().join("data");
    assert_eq!(sdci(&["gen", "--config", p(&cfg), "--out", p(&data)]), 0);
    let other = tiny_config(dir.path(), "linear-k2");
    assert_eq!(
        sdci(&[
            "train",
            "--config",
            p(&other),
            "--data",
            p(&data),
            "--out",
            p(&dir.path().join("r"))
        ]),
        2
    );
}
