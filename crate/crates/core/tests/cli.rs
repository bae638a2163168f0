use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gbsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbsg")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const CONFIG: &str = "\
# small synthetic cohort
paths.work_dir = work
paths.manifest = work/synth/manifest.csv
seed = 3
[grading]
grading.patch_radius = 1
grading.search_window = 1
grading.k = 10
rf.n_trees = 40
rf.runs = 2
synth.dims = 24
synth.structure_size = 5
synth.count.cn = 10
synth.count.smci = 4
synth.count.pmci = 4
synth.count.ad = 10
";

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("gbsg.conf");
    fs::write(&path, format!("{CONFIG}{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");

    assert_eq!(code(&gbsg(&["--help"])), 0);
    assert_eq!(code(&gbsg(&["run", "--no-such-flag"])), 1);
    assert_eq!(code(&gbsg(&["run"])), 1, "missing --config");
    assert_eq!(code(&gbsg(&["--config", &cfg, "--grading-mode", "fast", "run"])), 1);

    let bad_key = write_config(dir.path(), "grading.radius = 2\n");
    assert_eq!(code(&gbsg(&["--config", &bad_key, "run"])), 1);

    // Manifest not generated yet.
    let cfg = write_config(dir.path(), "");
    let out = gbsg(&["--config", &cfg, "run"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(code(&gbsg(&["--config", &cfg, "synth"])), 0);
    let out = gbsg(&["--config", &cfg, "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("svm acc=") && stdout.contains("rf acc="));
}

#[test]
fn staged_run_reproduces_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(code(&gbsg(&["--config", &cfg, "synth"])), 0);
    assert_eq!(code(&gbsg(&["--config", &cfg, "run"])), 0);
    let report = dir.path().join("work").join("report.txt");
    let full = fs::read(&report).unwrap();
    fs::remove_file(&report).unwrap();

    for stage in ["grade", "graph", "features", "train", "eval", "report"] {
        let out = gbsg(&["--config", &cfg, stage]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&report).unwrap(), full);

    // Overrides land in the recorded configuration.
    let out = gbsg(&["--config", &cfg, "--seed", "9", "--threads", "1", "--grading-mode", "patchmatch", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("seed = 9\n") && text.contains("grading.method = patchmatch\n"));
}
