use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset.shapes]
per_class = 60
[training]
max_epochs = 4
patience = 2
[explain]
instances = "3"
[fusion]
calibration_instances = 4
[optimizer]
lr_grid = [5e-3]
train_instances = 6
validation_instances = 3
[optimizer.training]
pool_size = 32
[optimizer.training.schedule]
max_epochs = 2
patience = 2
"#;

fn xforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xforge"))
        .args(args)
        .env("XFORGE_THREADS", "1")
        .output()
        .expect("run xforge")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status, stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_config_names_the_path() {
    let o = xforge(&["train-classifier", "--config", "/nonexistent/run.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_method_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let o = xforge(&["explain", "--config", &cfg, "--out", out.to_str().unwrap(), "--methods", "lime"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("lime") && e.contains("integrated_gradients") && e.contains("kernel_shap"), "{e}");
}

#[test]
fn invalid_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_xforge"))
        .args(["report", "--out", "/nonexistent"])
        .env("XFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("XFORGE_THREADS"));
}

#[test]
fn end_to_end_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let out_s = out.to_str().unwrap().to_string();
        let common = ["--config", cfg.as_str(), "--out", out_s.as_str(), "--seed", "3"];
        let with = |cmd: &str, extra: &[&str]| {
            let mut args = vec![cmd];
            args.extend_from_slice(&common);
            args.extend_from_slice(extra);
            ok(xforge(&args))
        };
        assert!(with("train-classifier", &[]).contains("test accuracy"));
        let methods = "saliency,integrated_gradients,kernel_shap";
        with("explain", &["--methods", methods, "--instances", "0..3"]);
        with("fuse", &["--methods", methods]);
        with("optimize", &["--lr-grid", "5e-3"]);
        with("evaluate", &[]);
        let report = with("report", &[]);
        assert!(report.contains("explanation_optimizer"), "{report}");
        assert!(report.contains("Kruskal-Wallis"), "{report}");
        out
    };
    let a = run("a");
    for f in ["metrics.csv", "summary.csv", "report.csv", "boxplot.csv", "weights.csv", "optimizer.xftn"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let maps = a.join("maps").join("t00000");
    for m in ["saliency", "kernel_shap", "weighted_average", "explanation_optimizer", "explanation_optimizer_hr"] {
        assert!(maps.join(format!("{m}.xmap")).is_file(), "missing {m}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("instance_id,method,faithfulness,complexity,undefined_flag"));

    let b = run("b");
    for m in ["integrated_gradients", "kernel_shap", "weighted_average", "explanation_optimizer"] {
        let p = Path::new("maps").join("t00001").join(format!("{m}.xmap"));
        assert_eq!(std::fs::read(a.join(&p)).unwrap(), std::fs::read(b.join(&p)).unwrap(), "{m}");
    }
    assert_eq!(metrics, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
}
