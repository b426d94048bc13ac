use std::io::{BufRead, BufReader, Write};

use sdci::config::{preset, DecoderSpec, ExperimentConfig};
use sdci::io::records::{read_all_records, write_record};
use sdci::io::{read_checkpoint, write_checkpoint, Dataset};
use sdci::model::{weights_from_graphs, Batch, Ctx, EdgeSource, Model};
use sdci::sim::{generate_dataset, SplitSizes};
use sdci::tensor::Tape;
use sdci::training::{fit_until, negative_elbo, Collect, Silent, TrainState};
use sdci::Error;

fn tiny(name: &str, train: usize) -> (ExperimentConfig, Dataset) {
    let mut exp = preset(name).unwrap();
    exp.data.sizes = SplitSizes {
        train,
        valid: 10,
        test: 10,
    };
    exp.model.hidden = 16;
    exp.model.decoder_hidden = 16;
    exp.train.batch_size = 10;
    exp.train.validate_every = 2;
    let ds = generate_dataset(&exp.data, exp.seed).unwrap();
    (exp, ds)
}

fn fresh(exp: &ExperimentConfig) -> TrainState<f32> {
    let model = Model::<f32>::new(exp.model_config().unwrap(), exp.seed).unwrap();
    TrainState::new(model, &exp.train, exp.seed)
}

fn flat(state: &TrainState<f32>) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for (_, t, _) in state.model.params.iter() {
        out.extend(t.data().iter().map(|v| v.to_bits()));
    }
    let (m, v) = state.adam.moments();
    for row in m.iter().chain(v) {
        out.extend(row.iter().map(|v| v.to_bits()));
    }
    if let Some(b) = &state.best {
        for (_, t, _) in b.params.iter() {
            out.extend(t.data().iter().map(|v| v.to_bits()));
        }
    }
    out
}

#[test]
fn overfits_a_small_training_set() {
    let (mut exp, ds) = tiny("linear-k1", 50);
    exp.train.epochs = 100;
    let mut st = fresh(&exp);
    let mut log = Collect::default();
    fit_until(&mut st, &exp.train, &ds.train, None, 100, &mut log).unwrap();
    let totals: Vec<f64> = log
        .0
        .iter()
        .filter(|r| r.split == "train")
        .filter_map(|r| r.total)
        .collect();
    assert_eq!(totals.len(), 100);
    // Totals carry a negative normalization constant per element; compare the excess over it.
    let elements = (exp.data.num_steps - 1) * exp.data.num_objects;
    let floor = 0.5 * (2.0 * std::f64::consts::PI * exp.train.sigma2).ln() * elements as f64;
    let (first, last) = (totals[0] - floor, totals[99] - floor);
    assert!(
        last < 0.5 * first,
        "epoch 1 {} epoch 100 {}",
        totals[0],
        totals[99]
    );
}

#[test]
fn same_seed_same_parameters() {
    let (mut exp, ds) = tiny("linear-k2", 20);
    exp.train.epochs = 4;
    let mut a = fresh(&exp);
    let mut b = fresh(&exp);
    fit_until(
        &mut a,
        &exp.train,
        &ds.train,
        Some(&ds.valid),
        4,
        &mut Silent,
    )
    .unwrap();
    fit_until(
        &mut b,
        &exp.train,
        &ds.train,
        Some(&ds.valid),
        4,
        &mut Silent,
    )
    .unwrap();
    assert!(flat(&a) == flat(&b));

    exp.seed += 1;
    let mut c = fresh(&exp);
    fit_until(
        &mut c,
        &exp.train,
        &ds.train,
        Some(&ds.valid),
        4,
        &mut Silent,
    )
    .unwrap();
    assert!(flat(&a) != flat(&c));
}

#[test]
fn resuming_from_a_checkpoint_is_bit_identical() {
    for name in ["linear-k2", "springs-wall"] {
        let (mut exp, ds) = tiny(name, 20);
        if name.starts_with("springs") {
            exp.data.num_steps = 12;
        }
        let ds = if name.starts_with("springs") {
            generate_dataset(&exp.data, exp.seed).unwrap()
        } else {
            ds
        };
        exp.train.epochs = 6;
        let mut straight = fresh(&exp);
        fit_until(
            &mut straight,
            &exp.train,
            &ds.train,
            Some(&ds.valid),
            6,
            &mut Silent,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = fresh(&exp);
        fit_until(
            &mut first,
            &exp.train,
            &ds.train,
            Some(&ds.valid),
            3,
            &mut Silent,
        )
        .unwrap();
        write_checkpoint(&path, &first, &exp.train, exp.seed).unwrap();
        let ck = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.seed, exp.seed);
        assert_eq!(ck.schedule, exp.train);
        assert!(
            flat(&ck.state) == flat(&first),
            "{name}: checkpoint round trip"
        );
        let mut resumed = ck.state;
        fit_until(
            &mut resumed,
            &exp.train,
            &ds.train,
            Some(&ds.valid),
            6,
            &mut Silent,
        )
        .unwrap();
        assert_eq!(resumed.epoch, 6);
        assert!(
            flat(&resumed) == flat(&straight),
            "{name}: resumed run diverged"
        );
    }
}

/// Rewrites a checkpoint, editing the header and dropping records.
fn rewrite(
    src: &std::path::Path,
    dst: &std::path::Path,
    edit_header: impl Fn(&mut serde_json::Value),
    keep: impl Fn(&str) -> bool,
) {
    let mut r = BufReader::new(std::fs::File::open(src).unwrap());
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    let mut header: serde_json::Value = serde_json::from_str(&line).unwrap();
    edit_header(&mut header);
    let records = read_all_records(&mut r, "checkpoint").unwrap();
    let mut w = std::fs::File::create(dst).unwrap();
    writeln!(w, "{header}").unwrap();
    for rec in records.iter().filter(|r| keep(&r.name)) {
        write_record(&mut w, rec).unwrap();
    }
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let (exp, _) = tiny("linear-k1", 10);
    let st = fresh(&exp);
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.ckpt");
    write_checkpoint(&good, &st, &exp.train, exp.seed).unwrap();

    let victim = st.model.params.iter().next().unwrap().0.to_string();
    let missing = dir.path().join("missing.ckpt");
    rewrite(&good, &missing, |_| {}, |n| n != format!("param/{victim}"));
    match read_checkpoint::<f32>(&missing) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, format!("param/{victim}")),
        other => panic!("expected a missing tensor error, got {other:?}"),
    }

    let wider = dir.path().join("wider.ckpt");
    rewrite(
        &good,
        &wider,
        |h| h["model"]["hidden"] = 24.into(),
        |_| true,
    );
    let err = read_checkpoint::<f32>(&wider).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("16") && msg.contains("24"), "{msg}");

    let newer = dir.path().join("newer.ckpt");
    rewrite(&good, &newer, |h| h["format_version"] = 99.into(), |_| true);
    assert!(matches!(
        read_checkpoint::<f32>(&newer),
        Err(Error::UnsupportedVersion { .. })
    ));

    assert!(read_checkpoint::<f64>(&good).is_err());
}

#[test]
fn fixed_decoder_with_true_graphs_leaves_only_the_constant() {
    let (mut exp, ds) = tiny("linear-k2", 10);
    exp.model.decoder = DecoderSpec::Fixed;
    let model = Model::<f64>::new(exp.model_config().unwrap(), 3).unwrap();
    let idx: Vec<usize> = (0..ds.train.len()).collect();
    let batch = Batch::<f64>::from_split(&ds.train, &idx);
    let graphs: Vec<_> = idx.iter().map(|&i| ds.train.graph(i)).collect();
    let w = weights_from_graphs::<f64>(&graphs, model.pairs(), 2).unwrap();

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &model.params, &bound, false);
    let out = model
        .forward(
            &mut ctx,
            &batch,
            EdgeSource::Given(&w),
            exp.train.teacher_forcing,
        )
        .unwrap();
    drop(ctx);
    let obj = negative_elbo(
        &mut tape,
        &model,
        &out,
        &batch,
        exp.train.sigma2,
        exp.train.lambda,
    )
    .unwrap();

    // Stored data is f32, so the rollout differs from the targets only by rounding.
    let per_sample = (exp.data.num_steps - 1) * exp.data.num_objects;
    let constant = 0.5 * (2.0 * std::f64::consts::PI * exp.train.sigma2).ln() * per_sample as f64;
    let excess = obj.breakdown.nll_p - constant;
    assert!(
        excess.abs() < 1e-3 * per_sample as f64,
        "nll_p {} constant {constant}",
        obj.breakdown.nll_p
    );
}
