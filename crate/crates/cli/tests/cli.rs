use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "epochs=2",
    "batch_size=16",
    "encoder.widths=[2, 4]",
    "dataset.count=30",
    "dataset.size=16",
    "transfer.epochs=1",
    "transfer.adapter_epochs=1",
    "transfer.target_hidden=8",
    "eval.probe_config.epochs=2",
    "eval.retrieval_queries=2",
];

fn taskfuse(args: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_taskfuse"));
    cmd.args(args).arg("--output-dir").arg(out);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .to_string()
}

#[test]
fn pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let pre = stdout(&taskfuse(&["pretrain", "--seed", "3"], dir.path()));
    let fused = field(&pre, "fused");
    let run_dir = field(&pre, "run_dir");
    assert!(run_dir.ends_with("-s3"));

    let info = stdout(&Command::new(env!("CARGO_BIN_EXE_taskfuse")).args(["inspect-checkpoint", &fused]).output().unwrap());
    assert_eq!(field(&info, "epoch"), "2");
    assert_eq!(field(&info, "seed"), "3");
    assert_eq!(field(&info, "note.role"), "fused");

    let tr = stdout(&taskfuse(&["transfer", "--seed", "3"], dir.path()));
    assert!(tr.contains("distill_loss"));
    let ev = stdout(&taskfuse(&["eval", "--seed", "3"], dir.path()));
    assert!(ev.contains("probe_test_accuracy") && ev.contains("nmi"));
    let cl = stdout(&taskfuse(&["cluster", "--seed", "3", "-k", "4", "--checkpoint", &fused], dir.path()));
    assert!(cl.contains("nmi") && !cl.contains("probe_test_accuracy"));

    let trace = Path::new(&run_dir).join("impact.csv");
    let png = dir.path().join("impact.png");
    let plot = stdout(&Command::new(env!("CARGO_BIN_EXE_taskfuse")).arg("plot").arg(&trace).arg("--out").arg(&png).output().unwrap());
    assert!(plot.contains("mean cv"));
    assert!(png.is_file());
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "tasks = [\"c\"]\nepochs = 5\n").unwrap();
    let out = taskfuse(&["pretrain", "--config", cfg.to_str().unwrap()], dir.path());
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch ")).count(), 2);
    let written = std::fs::read_to_string(Path::new(&field(&text, "run_dir")).join("config.toml")).unwrap();
    assert!(written.contains("tasks = [\"c\"]"));
}

#[test]
fn exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let bad = taskfuse(&["pretrain", "--set", "momentum=1.5"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    let missing = taskfuse(&["transfer"], dir.path());
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("run pretrain first"));
    let no_cfg = taskfuse(&["eval", "--config", "/nonexistent.toml"], dir.path());
    assert_eq!(no_cfg.status.code(), Some(3));
    let garbage = dir.path().join("trace.csv");
    std::fs::write(&garbage, "epoch,task,impact\nx,r,1\n").unwrap();
    let plot = Command::new(env!("CARGO_BIN_EXE_taskfuse")).arg("plot").arg(&garbage).output().unwrap();
    assert_eq!(plot.status.code(), Some(5));
}
