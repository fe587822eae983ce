use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kneeseg(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kneeseg"))
        .args(args)
        .env("KNEESEG_OUT_ROOT", out_root)
        .output()
        .expect("binary runs")
}

fn stdout_line(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap().trim().to_string()
}

/// Failure output must be exactly one `Code: message` line.
fn error_code(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err:?}");
    err.split(':').next().unwrap().to_string()
}

const SMALL_CONFIG: &str = "epochs = 1\nlr_drop_epoch = 1\nfold_count = 2\nbatch_size = 4\nslice_stride = 4\n\n[preprocess]\ncrop_size = [32, 32]\n";

fn generate(tmp: &Path) -> PathBuf {
    let data = tmp.join("data");
    let o = kneeseg(
        &["phantom", "generate", "--out", data.to_str().unwrap(), "--source-n", "4", "--target-n", "2", "--seed", "5", "--gap", "strong"],
        tmp,
    );
    let manifest = PathBuf::from(stdout_line(&o));
    assert!(manifest.exists());
    manifest
}

#[test]
fn generation_errors_are_single_line_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = kneeseg(&["phantom", "generate", "--out", out.to_str().unwrap(), "--source-n", "0", "--target-n", "2"], tmp.path());
    assert_eq!(error_code(&o), "ConfigError");
}

#[test]
fn bad_inputs_map_to_error_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate(tmp.path());
    let m = manifest.to_str().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();

    let o = kneeseg(&["train", "--config", c, "--manifest", m, "--tiny", "--setting", "UDA9"], tmp.path());
    assert_eq!(error_code(&o), "ConfigError");

    fs::write(tmp.path().join("bad.toml"), "epochs = [").unwrap();
    let bad = tmp.path().join("bad.toml");
    let o = kneeseg(&["train", "--config", bad.to_str().unwrap(), "--manifest", m], tmp.path());
    assert_eq!(error_code(&o), "ParseError");

    let o = kneeseg(&["train", "--config", c, "--manifest", "/nonexistent/manifest.csv"], tmp.path());
    assert_eq!(error_code(&o), "IoError");

    fs::write(tmp.path().join("nowd.toml"), format!("{SMALL_CONFIG}weight_decay = 5e-5\n")).unwrap();
    let nowd = tmp.path().join("nowd.toml");
    let o = kneeseg(&["train", "--config", nowd.to_str().unwrap(), "--manifest", m, "--setting", "MIXUP_NO_WD"], tmp.path());
    assert_eq!(error_code(&o), "ConfigError");

    let o = kneeseg(&["evaluate", "--run", "missing-run", "--manifest", m], tmp.path());
    assert_eq!(error_code(&o), "DataError");
}

#[test]
fn train_evaluate_compare_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");
    let manifest = generate(tmp.path());
    let m = manifest.to_str().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();

    let seq = PathBuf::from(stdout_line(&kneeseg(&["train", "--config", c, "--manifest", m, "--tiny"], &root)));
    let par = PathBuf::from(stdout_line(&kneeseg(&["train", "--config", c, "--manifest", m, "--tiny", "--parallel-folds", "2"], &root)));
    assert!(seq.starts_with(&root) && par.starts_with(&root));
    assert_ne!(seq, par);
    let record = |d: &Path| {
        fs::read_to_string(d.join("run.txt"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("run_id="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(record(&seq), record(&par));
    assert!(record(&seq).contains("fold.1.digest="));

    let run_id = seq.file_name().unwrap().to_str().unwrap();
    let table = PathBuf::from(stdout_line(&kneeseg(&["evaluate", "--run", run_id, "--manifest", m, "--classes", "fc,tc"], &root)));
    let eval = table.parent().unwrap().to_path_buf();
    assert_eq!(eval, seq.join("eval"));
    for f in ["table_BASELINE.csv", "report_BASELINE.csv", "summary_BASELINE.txt", "profile_fc_BASELINE.csv", "profile_tc_BASELINE.png"] {
        assert!(eval.join(f).exists(), "{f} missing");
    }
    let header = fs::read_to_string(&table).unwrap();
    assert!(header.lines().any(|l| l == "method,group,fc_mean,fc_std,fc_count,tc_mean,tc_std,tc_count"));

    let report = eval.join("report_BASELINE.csv");
    let r = report.to_str().unwrap();
    let cmp = tmp.path().join("cmp.csv");
    let o = kneeseg(&["compare", r, r, "--name-b", "again", "--out", cmp.to_str().unwrap()], &root);
    let text = stdout_line(&o);
    assert!(text.contains("fc,BASELINE,again"));
    assert_eq!(fs::read_to_string(&cmp).unwrap().trim(), text);

    let text = fs::read_to_string(&report).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    let short = tmp.path().join("short.csv");
    fs::write(&short, lines.join("\n") + "\n").unwrap();
    let o = kneeseg(&["compare", r, short.to_str().unwrap()], &root);
    assert_eq!(error_code(&o), "DataError");

    let png = tmp.path().join("overlay.png");
    let fc = eval.join("profile_fc_BASELINE.csv");
    let tc = eval.join("profile_tc_BASELINE.csv");
    let o = kneeseg(&["plot", fc.to_str().unwrap(), tc.to_str().unwrap(), "--out", png.to_str().unwrap(), "--labels", "fc,tc"], &root);
    stdout_line(&o);
    assert!(fs::metadata(&png).unwrap().len() > 0);
}
