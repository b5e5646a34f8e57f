//! End-to-end tests of the `bnc` binary: sweep determinism and resume,
//! k-fold summary consistency, trade-off filtering, and report emission.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bnc"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn bnc");
    assert!(
        out.status.success(),
        "bnc {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

/// Two informative features (one strongly class-linked, one noise).
fn write_train_csv(dir: &Path, rows: usize) -> PathBuf {
    use std::io::Write;
    let path = dir.join("train.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    // Simple deterministic generator, no external seeding involved.
    let mut state = 0x12345678u64;
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as f64 / (1u64 << 31) as f64
    };
    for _ in 0..rows {
        let y = usize::from(next() < 0.5);
        let x0 = y as f64 + 0.2 * next();
        let x1 = next();
        writeln!(f, "{y},{x0:.6},{x1:.6}").unwrap();
    }
    path
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn sweep_config(data: &Path, split: &str, bits: &str, lr_grid: &str) -> String {
    format!(
        r#"seed = 5
draws = 1

[dataset]
name = "toy"
path = "{}"
split = {split}

[model]
family = "bnc-nb"

[sweep]
bits = {bits}
lr_grid = {lr_grid}

[optimizer]
epochs = 3
batch_size = 20
"#,
        data.display()
    )
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn sweep_results_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 60);
    let cfg = write_config(
        dir.path(),
        &sweep_config(&data, "\"holdout\"", r#"["float32", { bi = 2, bf = 2 }]"#, "[0.03]"),
    );
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    let first = read(&out_a.join("results.csv"));
    assert_eq!(first, read(&out_b.join("results.csv")));
    assert_eq!(first.lines().count(), 3, "header + one row per grid point");

    // Rerunning over a complete file writes nothing and changes nothing.
    let stdout =
        run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()]);
    assert!(stdout.contains("0 new rows"), "stdout: {stdout}");
    assert_eq!(first, read(&out_a.join("results.csv")));
}

#[test]
fn interrupted_sweep_resumes_to_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 60);
    let cfg = write_config(
        dir.path(),
        &sweep_config(
            &data,
            "{ kfold = 3 }",
            r#"["float32", { bi = 2, bf = 2 }]"#,
            "[0.03]",
        ),
    );
    let out = dir.path().join("out");
    run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let results = out.join("results.csv");
    let full = read(&results);
    // 2 grid points x (3 fold rows + summary) + header.
    assert_eq!(full.lines().count(), 9);

    // Chop the file mid-point (drop the last 3 lines) and resume.
    let lines: Vec<&str> = full.lines().collect();
    let truncated: String =
        lines[..lines.len() - 3].iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&results, &truncated).unwrap();
    let stdout =
        run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("3 new rows"), "stdout: {stdout}");
    assert_eq!(full, read(&results));
}

#[test]
fn kfold_summary_rows_are_exact_fold_means() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 60);
    let cfg = write_config(
        dir.path(),
        &sweep_config(&data, "{ kfold = 3 }", r#"["float32"]"#, "[0.03]"),
    );
    let out = dir.path().join("out");
    run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = read(&out.join("results.csv"));
    let rows: Vec<Vec<&str>> =
        text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let fold_rows = &rows[..3];
    let summary = &rows[3];
    assert!(fold_rows.iter().all(|r| r[0].starts_with("toy#fold-")));
    assert_eq!(summary[0], "toy");
    // bits_total, ops, train_err, test_err occupy columns 8..=11.
    for col in 8..=11 {
        let mean: f64 = fold_rows
            .iter()
            .map(|r| r[col].parse::<f64>().unwrap())
            .sum::<f64>()
            / fold_rows.len() as f64;
        let reported: f64 = summary[col].parse().unwrap();
        assert!(
            (mean - reported).abs() <= 1e-12,
            "column {col}: recomputed {mean} vs reported {reported}"
        );
    }
}

#[test]
fn zero_learning_rate_reports_untrained_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 90);
    let out_frozen = dir.path().join("frozen");
    let out_trained = dir.path().join("trained");
    let base = sweep_config(&data, "\"holdout\"", r#"["float32"]"#, "[0.0]");
    let cfg_frozen = write_config(dir.path(), &base);
    run_ok(&[
        "sweep",
        "--config",
        cfg_frozen.to_str().unwrap(),
        "--out",
        out_frozen.to_str().unwrap(),
    ]);
    let trained_toml = base.replace("[0.0]", "[0.05]").replace("epochs = 3", "epochs = 25");
    let cfg_trained = dir.path().join("config-trained.toml");
    std::fs::write(&cfg_trained, trained_toml).unwrap();
    run_ok(&[
        "sweep",
        "--config",
        cfg_trained.to_str().unwrap(),
        "--out",
        out_trained.to_str().unwrap(),
    ]);

    let err_of = |out: &Path| -> (f64, f64) {
        let text = read(&out.join("results.csv"));
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        (row[7].parse().unwrap(), row[11].parse().unwrap())
    };
    let (lr_frozen, err_frozen) = err_of(&out_frozen);
    let (lr_trained, err_trained) = err_of(&out_trained);
    assert_eq!(lr_frozen, 0.0);
    assert_eq!(lr_trained, 0.05);
    // The class-linked feature makes this dataset easy: training must beat
    // the frozen random initialization decisively.
    assert!(err_trained < 0.1, "trained err {err_trained}");
    assert!(err_frozen > err_trained + 0.1, "frozen {err_frozen} vs trained {err_trained}");
}

#[test]
fn better_learning_rate_wins_the_race() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 90);
    // One hopeless rate (0) and one workable rate: every row must report the
    // workable one.
    let base = sweep_config(&data, "\"holdout\"", r#"["float32"]"#, "[0.0, 0.05]")
        .replace("epochs = 3", "epochs = 25");
    let cfg = write_config(dir.path(), &base);
    let out = dir.path().join("out");
    run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = read(&out.join("results.csv"));
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[7], "0.05");
    assert!(row[11].parse::<f64>().unwrap() < 0.1);
}

fn results_fixture(dir: &Path, rows: &[(&str, u64, u64, f64)]) -> PathBuf {
    let header = "dataset,family,structure,bits_per_param,B_I,B_F,lambda_ms,lr0,\
                  bits_total,ops,train_err,test_err,seed";
    let mut text = format!("{header}\n");
    for (name, bits, ops, err) in rows {
        text.push_str(&format!("{name},bnc-nb,nb,32,,,0,0.03,{bits},{ops},0.1,{err},7\n"));
    }
    let path = dir.join("results.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pareto_subcommand_matches_a_quadratic_oracle() {
    let dir = tempfile::tempdir().unwrap();
    // Deterministic pseudo-random grid of 60 points.
    let mut state = 987654321u64;
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) % 1000
    };
    let mut rows = Vec::new();
    let names: Vec<String> = (0..60).map(|i| format!("p{i}")).collect();
    for name in &names {
        rows.push((name.as_str(), next() + 1, next() + 1, next() as f64 / 1000.0));
    }
    let results = results_fixture(dir.path(), &rows);
    let out = dir.path().join("out");
    run_ok(&[
        "pareto",
        "--results",
        results.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let kept: Vec<String> = read(&out.join("pareto.csv"))
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();

    // All-pairs oracle over (bits, ops, err), minimizing each.
    let dominated = |a: &(&str, u64, u64, f64), b: &(&str, u64, u64, f64)| {
        b.1 <= a.1
            && b.2 <= a.2
            && b.3 <= a.3
            && (b.1 < a.1 || b.2 < a.2 || b.3 < a.3)
    };
    let expected: Vec<&str> = rows
        .iter()
        .filter(|a| !rows.iter().any(|b| dominated(a, b)))
        .map(|r| r.0)
        .collect();
    assert_eq!(kept, expected);
}

#[test]
fn report_draws_one_marker_per_row_and_respects_pareto_only() {
    let dir = tempfile::tempdir().unwrap();
    let results = results_fixture(
        dir.path(),
        &[
            ("a", 100, 10, 0.5),
            ("b", 200, 20, 0.6), // dominated by a
            ("c", 50, 30, 0.4),
            ("d#fold-0", 50, 30, 0.4), // detail row: never plotted
        ],
    );
    let out = dir.path().join("out");
    run_ok(&[
        "report",
        "--results",
        results.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let svg = read(&out.join("scatter.svg"));
    assert_eq!(svg.matches("<circle").count(), 3);
    assert_eq!(read(&out.join("report.csv")).lines().count(), 4);

    run_ok(&[
        "report",
        "--results",
        results.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--pareto-only",
        "--x-axis",
        "ops",
        "--log-x",
    ]);
    let svg = read(&out.join("scatter.svg"));
    assert_eq!(svg.matches("<circle").count(), 2, "a and c survive");
    assert!(svg.contains("log scale"));
}

#[test]
fn single_run_subcommands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 60);
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"seed = 3

[dataset]
name = "toy"
path = "{}"

[model]
family = "bnc-tan"

[quant]
bi = 2
bf = 2

[optimizer]
epochs = 3
batch_size = 20
"#,
            data.display()
        ),
    );
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    run_ok(&["discretize", "--config", cfg.to_str().unwrap(), "--out", out_s]);
    assert!(out.join("discretizer.json").exists());

    run_ok(&["train-bnc", "--config", cfg.to_str().unwrap(), "--out", out_s]);
    for f in ["model.json", "history.csv", "budget.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let stdout = run_ok(&[
        "budget",
        "--model",
        out.join("model.json").to_str().unwrap(),
        "--kind",
        "bnc",
        "--out",
        out_s,
    ]);
    assert!(stdout.contains("bits"), "stdout: {stdout}");

    // The saved model reloads and the history has one line per epoch.
    let model = bnc_core::BncModel::load_json(&out.join("model.json")).unwrap();
    assert_eq!(model.quant.map(|q| q.total_bits()), Some(4));
    assert_eq!(read(&out.join("history.csv")).lines().count(), 1 + 3);
}

#[test]
fn structure_learning_and_network_commands_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 60);
    let structure_cfg = write_config(
        dir.path(),
        &format!(
            r#"seed = 3
lambda_ms = 0.1

[dataset]
name = "toy"
path = "{}"

[model]
family = "bnc-structure"

[optimizer]
epochs = 4
batch_size = 20
"#,
            data.display()
        ),
    );
    let out = dir.path().join("s");
    run_ok(&[
        "learn-structure",
        "--config",
        structure_cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    for f in ["model.json", "structure.json", "history.csv", "budget.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let fc_cfg = dir.path().join("fc.toml");
    std::fs::write(
        &fc_cfg,
        format!(
            r#"seed = 3

[dataset]
name = "toy"
path = "{}"

[model]
family = "fc"
hidden = 4

[quant]
bits = 2

[optimizer]
epochs = 3
batch_size = 20
"#,
            data.display()
        ),
    )
    .unwrap();
    let out_fc = dir.path().join("fc");
    run_ok(&[
        "train-dnn",
        "--config",
        fc_cfg.to_str().unwrap(),
        "--out",
        out_fc.to_str().unwrap(),
    ]);
    assert!(out_fc.join("model.json").exists());
    let stdout = run_ok(&[
        "budget",
        "--model",
        out_fc.join("model.json").to_str().unwrap(),
        "--kind",
        "dnn",
        "--out",
        out_fc.to_str().unwrap(),
    ]);
    assert!(stdout.contains("ops"));
}

#[test]
fn seed_flag_changes_results_and_config_records_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_train_csv(dir.path(), 60);
    let cfg = write_config(
        dir.path(),
        &sweep_config(&data, "\"holdout\"", r#"["float32"]"#, "[0.03]"),
    );
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()]);
    run_ok(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    let a = read(&out_a.join("results.csv"));
    let b = read(&out_b.join("results.csv"));
    assert_ne!(a, b, "a different master seed must change the rows");
    assert!(read(&out_b.join("config-resolved.toml")).contains("resolved_seed = 99"));
}
