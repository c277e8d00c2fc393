//! End-to-end checks of the command-line surface, run against the built
//! binary via temp directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn asnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asnmt")).args(args).output().expect("binary runs")
}

fn asnmt_in(dir: &Path, args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asnmt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn micro_config(data_dir: &Path) -> String {
    format!(
        "num_layers = 1\n\
         d_model = 16\n\
         num_heads = 2\n\
         d_ffn = 16\n\
         max_positions = 32\n\
         dropout = 0.0\n\
         label_smoothing = 0.1\n\
         learning_rate = 3e-3\n\
         batch_tokens = 64\n\
         max_epochs = 2\n\
         seed = 5\n\
         data_dir = {}\n",
        data_dir.display()
    )
}

fn gen_micro(dir: &Path, task: &str, seed: u64) -> PathBuf {
    let data = dir.join(format!("data-{task}-{seed}"));
    let out = asnmt(&[
        "gen",
        "--task",
        task,
        "--vocab-size",
        "12",
        "--size",
        "60",
        "--min-len",
        "2",
        "--max-len",
        "5",
        "--seed",
        &seed.to_string(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen failed: {}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn gen_is_reproducible_and_reverse_reverses() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_micro(dir.path(), "copy", 9);
    let b = gen_micro(dir.path(), "copy", 9);
    for name in ["train.src", "train.tgt", "valid.src", "vocab.txt"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical seeds");
    }
    // copy: src == tgt
    assert_eq!(
        std::fs::read_to_string(a.join("train.src")).unwrap(),
        std::fs::read_to_string(a.join("train.tgt")).unwrap()
    );

    let r = gen_micro(dir.path(), "reverse", 9);
    let src = std::fs::read_to_string(r.join("train.src")).unwrap();
    let tgt = std::fs::read_to_string(r.join("train.tgt")).unwrap();
    for (s, t) in src.lines().zip(tgt.lines()) {
        let mut rev: Vec<&str> = s.split_whitespace().collect();
        rev.reverse();
        assert_eq!(rev.join(" "), t);
    }
}

#[test]
fn gen_rejects_tiny_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let out = asnmt(&[
        "gen",
        "--task",
        "copy",
        "--vocab-size",
        "4",
        "--size",
        "10",
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));
}

#[test]
fn train_rejects_unknown_config_key_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "warmup_schedule = linear\n").unwrap();
    let out = asnmt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-checkpoint",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup_schedule"));
}

#[test]
fn train_writes_checkpoint_and_history_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro(dir.path(), "copy", 3);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, micro_config(&data)).unwrap();

    let run = |name: &str| -> (Vec<u8>, String) {
        let ckpt = dir.path().join(name);
        let out = asnmt(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out-checkpoint",
            ckpt.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
        let history = std::fs::read_to_string(format!("{}.history", ckpt.display())).unwrap();
        (std::fs::read(&ckpt).unwrap(), history)
    };
    let (ckpt_a, hist_a) = run("a.ckpt");
    let (ckpt_b, hist_b) = run("b.ckpt");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ across identical runs");
    assert_eq!(hist_a, hist_b);
    assert_eq!(hist_a.lines().count(), 2); // one record per epoch
    assert!(hist_a.contains("val_loss="));
    assert!(hist_a.contains("zero_groups="));
    assert!(hist_a.contains("reg_value="));
}

#[test]
fn huge_lambda_training_reports_all_groups_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro(dir.path(), "copy", 4);
    let config = dir.path().join("run.conf");
    std::fs::write(
        &config,
        micro_config(&data) + "lambda = 1e6\nscope = ffn\nmax_epochs = 1\n",
    )
    .unwrap();
    let ckpt = dir.path().join("zeroed.ckpt");
    let out = asnmt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let history = std::fs::read_to_string(format!("{}.history", ckpt.display())).unwrap();
    // one layer each side, width 16: all 32 ffn groups dead
    assert!(history.contains("zero_groups=32"), "history was: {history}");

    // pruning that checkpoint deletes every ffn matrix
    let pruned = dir.path().join("zeroed.pruned.ckpt");
    let out = asnmt(&[
        "prune",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        pruned.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("pruned_groups=32"), "prune said: {text}");
    assert!(
        std::fs::metadata(&pruned).unwrap().len() < std::fs::metadata(&ckpt).unwrap().len()
    );
}

#[test]
fn prune_without_zeros_changes_nothing_and_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro(dir.path(), "copy", 5);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, micro_config(&data)).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(asnmt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ])
    .status
    .success());

    let pruned = dir.path().join("m.pruned.ckpt");
    let out = asnmt(&[
        "prune",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        pruned.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout_of(&out).contains("pruned_groups=0"));
    assert_eq!(
        std::fs::metadata(&ckpt).unwrap().len(),
        std::fs::metadata(&pruned).unwrap().len()
    );

    // byte-drop accounting on a constructed near-zero checkpoint via
    // --epsilon: zero one row first, then prune
    let (mut model, vocab) = asnmt::checkpoint::load(&ckpt).unwrap();
    let w1 = model.params.get_mut("encoder.layer0.ffn.w1").unwrap();
    let cols = w1.shape[1];
    for v in &mut w1.data[0..cols] {
        *v = 1e-12;
    }
    let near = dir.path().join("near.ckpt");
    asnmt::checkpoint::save(&near, &model, &vocab).unwrap();
    let out = asnmt(&[
        "prune",
        "--checkpoint",
        near.to_str().unwrap(),
        "--out",
        dir.path().join("near.pruned.ckpt").to_str().unwrap(),
        "--epsilon",
        "1e-8",
    ]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("zeroed_groups=1"), "epsilon pass said: {text}");
    assert!(text.contains("pruned_groups=1"));
}

#[test]
fn eval_beam_one_matches_greedy_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro(dir.path(), "copy", 6);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, micro_config(&data)).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(asnmt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ])
    .status
    .success());

    let hyp = dir.path().join("hyp.txt");
    let out = asnmt(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--beam",
        "1",
        "--limit",
        "6",
        "--hyp-out",
        hyp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let records = stdout_of(&out);
    for key in ["bleu=", "token_accuracy=", "sentences=6"] {
        assert!(records.contains(key), "eval records missing {key}: {records}");
    }

    // reference greedy decode through the library
    let (model, vocab) = asnmt::checkpoint::load(&ckpt).unwrap();
    let sources = asnmt::data::read_lines(&data.join("test.src"), &vocab).unwrap();
    let mut expect = String::new();
    for src in sources.iter().take(6) {
        let tokens = asnmt::decode::greedy_decode(&model, src, 2 * src.len() + 10).unwrap();
        expect.push_str(&vocab.detokenize(&tokens));
        expect.push('\n');
    }
    assert_eq!(std::fs::read_to_string(&hyp).unwrap(), expect);
}

#[test]
fn eval_is_identical_before_and_after_pruning_exact_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro(dir.path(), "copy", 7);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, micro_config(&data)).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(asnmt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ])
    .status
    .success());

    // construct exact zeros, then compare eval records before/after prune
    let (mut model, vocab) = asnmt::checkpoint::load(&ckpt).unwrap();
    let w1 = model.params.get_mut("encoder.layer0.ffn.w1").unwrap();
    let cols = w1.shape[1];
    w1.data[0..3 * cols].fill(0.0);
    let b1 = model.params.get_mut("encoder.layer0.ffn.b1").unwrap();
    b1.data[0..3].fill(0.0);
    let zeroed = dir.path().join("zeroed.ckpt");
    asnmt::checkpoint::save(&zeroed, &model, &vocab).unwrap();
    let pruned = dir.path().join("pruned.ckpt");
    assert!(asnmt(&[
        "prune",
        "--checkpoint",
        zeroed.to_str().unwrap(),
        "--out",
        pruned.to_str().unwrap(),
    ])
    .status
    .success());

    let eval = |ckpt: &Path| -> String {
        let out = asnmt(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--corpus",
            data.to_str().unwrap(),
            "--split",
            "test",
            "--beam",
            "5",
            "--limit",
            "8",
        ]);
        assert!(out.status.success());
        stdout_of(&out)
    };
    assert_eq!(eval(&zeroed), eval(&pruned));
}

#[test]
fn report_renders_rows_in_given_order_with_closed_form_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro(dir.path(), "copy", 8);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, micro_config(&data)).unwrap();
    let base = dir.path().join("base.ckpt");
    assert!(asnmt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-checkpoint",
        base.to_str().unwrap(),
    ])
    .status
    .success());

    // single system: exactly one data row
    let out = asnmt(&["report", "--baseline", base.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("system=")).count(), 1);

    // baseline + three pruned variants, rows in the order given
    let (mut model, vocab) = asnmt::checkpoint::load(&base).unwrap();
    let mut variants = Vec::new();
    for (i, kill) in [2usize, 5, 9].iter().enumerate() {
        let w1 = model.params.get_mut("encoder.layer0.ffn.w1").unwrap();
        let cols = w1.shape[1];
        for r in 0..*kill {
            w1.data[r * cols..(r + 1) * cols].fill(0.0);
        }
        let path = dir.path().join(format!("var{i}.ckpt"));
        let snapshot = model.clone();
        let specs = asnmt::autosize::scope_to_groups(&snapshot, asnmt::autosize::AutosizeScope::Ffn);
        let dead = asnmt::autosize::detect_dead_groups(&snapshot, &specs).unwrap();
        let (compacted, _) = asnmt::autosize::compact(&snapshot, &dead, &vocab).unwrap();
        asnmt::checkpoint::save(&path, &compacted, &vocab).unwrap();
        variants.push((path, compacted));
    }
    let mut args: Vec<String> =
        vec!["report".into(), "--baseline".into(), base.display().to_string()];
    for (path, _) in &variants {
        args.push("--pruned".into());
        args.push(path.display().to_string());
    }
    let out = asnmt_in(dir.path(), &args);
    assert!(out.status.success());
    let text = stdout_of(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("system=")).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].contains("system=base"));
    for (i, ((_, compacted), row)) in variants.iter().zip(&rows[1..]).enumerate() {
        assert!(row.contains(&format!("system=var{i}")));
        assert!(
            row.contains(&format!("params={}", compacted.param_count())),
            "row {row} lacks closed-form count"
        );
    }
}

#[test]
fn corrupted_checkpoint_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro(dir.path(), "copy", 10);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, micro_config(&data) + "max_epochs = 1\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(asnmt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ])
    .status
    .success());

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = asnmt(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        data.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn help_documents_reference_defaults() {
    let out = asnmt(&["--help"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    for needle in ["512", "2048", "0.1", "1e-4", "1e-5", "beam 5"] {
        assert!(text.contains(needle), "--help missing default {needle}: {text}");
    }
    // the default config file spells them all out as keys
    let out = asnmt(&["init-config"]);
    let text = stdout_of(&out);
    for needle in [
        "d_model = 512",
        "num_heads = 8",
        "d_ffn = 2048",
        "dropout = 0.1",
        "label_smoothing = 0.1",
        "learning_rate = 1e-4",
        "lr_floor = 1e-5",
        "clip_norm = 0.1",
    ] {
        assert!(text.contains(needle), "init-config missing {needle}");
    }
}
