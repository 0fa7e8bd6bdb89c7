use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn foodspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foodspace"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn snapshot_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("snapshots")
}

const HELP_PAGES: &[&[&str]] = &[
    &[],
    &["vocab"],
    &["vocab", "build"],
    &["vocab", "propose"],
    &["data"],
    &["data", "synth"],
    &["data", "split"],
    &["assoc"],
    &["assoc", "train"],
    &["assoc", "embed"],
    &["retrieval", "eval"],
    &["gan"],
    &["gan", "train"],
    &["gan", "sample"],
    &["gan", "interpolate"],
    &["metrics"],
    &["metrics", "is"],
    &["metrics", "fid"],
    &["metrics", "train-extractor"],
    &["exp"],
    &["exp", "run"],
    &["exp", "report"],
    &["doctor"],
];

#[test]
fn help_pages_match_snapshots() {
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let dir = snapshot_dir();
    let mut mismatched = Vec::new();
    for page in HELP_PAGES {
        let mut args: Vec<&str> = page.to_vec();
        args.push("--help");
        let out = foodspace(&args);
        assert_eq!(code(&out), 0, "{args:?}");
        let text = String::from_utf8(out.stdout).unwrap();
        let name = if page.is_empty() { "foodspace".to_string() } else { page.join("_") };
        let path = dir.join(format!("{name}.txt"));
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &text).unwrap();
        } else if std::fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            mismatched.push(name);
        }
    }
    assert!(mismatched.is_empty(), "help text changed for {mismatched:?}; rerun with UPDATE_SNAPSHOTS=1");
}

#[test]
fn version_flag_succeeds() {
    let out = foodspace(&["--version"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn unknown_command_is_usage_error() {
    assert_eq!(code(&foodspace(&["frobnicate"])), 2);
    assert_eq!(code(&foodspace(&[])), 2);
    assert_eq!(code(&foodspace(&["gan", "train"])), 2);
}

#[test]
fn bad_configuration_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&foodspace(&["--set", "gan.nope=1", "doctor"])), 4);
    assert_eq!(code(&foodspace(&["--set", "noequals", "doctor"])), 4);
    assert_eq!(code(&foodspace(&["--set", "assoc.margin=5", "doctor"])), 4);
    assert_eq!(code(&foodspace(&["--set", "assoc.epochs=many", "--out", out, "data", "synth"])), 4);
    assert_eq!(code(&foodspace(&["--config", "/nonexistent/cfg.txt", "doctor"])), 4);

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "synth.unknown_key = 3\n").unwrap();
    assert_eq!(code(&foodspace(&["--config", cfg.to_str().unwrap(), "doctor"])), 4);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let missing = dir.path().join("missing");
    let missing = missing.to_str().unwrap();
    assert_eq!(code(&foodspace(&["--out", out, "assoc", "train", "--data", missing])), 3);
    assert_eq!(code(&foodspace(&["doctor", "--data", missing])), 3);
    assert_eq!(code(&foodspace(&["exp", "report", "--dir", missing])), 3);
    assert_eq!(code(&foodspace(&["--out", out, "vocab", "build", "--corpus", missing])), 3);
}

#[test]
fn environment_layer_sits_between_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a.cfg");
    std::fs::write(&cfg, "assoc.margin = 0.5\n").unwrap();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_foodspace"));
        cmd.args(["--config", cfg.to_str().unwrap()]);
        if let Some(v) = flag {
            cmd.args(["--set", &format!("assoc.margin={v}")]);
        }
        cmd.arg("doctor");
        if let Some(v) = env {
            cmd.env("FOODSPACE_ASSOC__MARGIN", v);
        }
        cmd.output().unwrap()
    };
    // An invalid margin from a lower layer is hidden by a valid higher one.
    assert_eq!(code(&run(Some("7"), None)), 4);
    assert_eq!(code(&run(Some("7"), Some("0.3"))), 0);
    assert_eq!(code(&run(None, None)), 0);
}

#[test]
fn data_synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let args = [
        "--seed",
        "3",
        "--set",
        "synth.n_train=6",
        "--set",
        "synth.n_val=2",
        "--set",
        "synth.n_test=2",
        "--set",
        "synth.variant_sizes=[16]",
        "--out",
        out.to_str().unwrap(),
        "data",
        "synth",
    ];
    assert_eq!(code(&foodspace(&args)), 0);
    let first = read_tree(&out);
    assert!(first.iter().any(|(p, _)| p.ends_with("manifest.jsonl")));
    assert_eq!(code(&foodspace(&args)), 0);
    assert_eq!(first, read_tree(&out));
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}
