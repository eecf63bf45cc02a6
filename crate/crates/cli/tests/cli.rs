use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ragadapt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragadapt"))
        .args(args)
        .current_dir(dir)
        .env_remove("RAGADAPT_THREADS")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
[world]
classes = 4
dim = 8
kappa = 0.2
rho_c = 0.05
nu = 0.5
tau_mode = "adversarial"
db_per_cluster = 8

[experiment]
trials = 3
shots = [1, 4]
ratios = [0.5, 2.0]
omegas = [1.0, 5.0]
test_size = 200
validation_size = 100
emit_grid = true

[finetune]
epochs = 3

[verify]
worlds = 2
samples = 300
theorem_shots = [1, 4]
theorem_trials = 40
ensemble_shots = 4
bernstein_trials = 200
lipschitz_points = 2000
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn help_and_version_exit_zero() {
    let dir = setup();
    assert_eq!(code(&ragadapt(&["--help"], dir.path())), 0);
    assert_eq!(code(&ragadapt(&["--version"], dir.path())), 0);
    assert_eq!(code(&ragadapt(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&ragadapt(&["run", "--threads", "many"], dir.path())), 1);
}

#[test]
fn run_output_is_identical_across_thread_counts() {
    let dir = setup();
    let a = ragadapt(&["run", "--config", "small.toml", "--out", "t1", "--threads", "1", "--quiet"], dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert!(a.stdout.is_empty());
    let b = Command::new(env!("CARGO_BIN_EXE_ragadapt"))
        .args(["run", "--config", "small.toml", "--out", "t4", "--quiet"])
        .env("RAGADAPT_THREADS", "4")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&b), 0);
    for f in ["results.csv", "summary.csv", "grid.csv", "manifest.txt"] {
        assert_eq!(fs::read(dir.path().join("t1").join(f)).unwrap(), fs::read(dir.path().join("t4").join(f)).unwrap(), "{f}");
    }
    let results = fs::read_to_string(dir.path().join("t1/results.csv")).unwrap();
    assert!(results.starts_with("trial,K,retrieval_mode,head,alpha,gamma,omega,accuracy,ce_risk\n"));
    // 3 trials x 3 arms x 2 K x 4 heads
    assert_eq!(results.lines().count(), 1 + 72);

    let seeded = ragadapt(&["run", "--config", "small.toml", "--out", "s7", "--seed", "7", "--quiet"], dir.path());
    assert_eq!(code(&seeded), 0);
    assert_ne!(fs::read(dir.path().join("t1/results.csv")).unwrap(), fs::read(dir.path().join("s7/results.csv")).unwrap());
    assert!(fs::read_to_string(dir.path().join("s7/manifest.txt")).unwrap().contains("master_seed = 7"));
}

#[test]
fn existing_output_is_never_overwritten() {
    let dir = setup();
    fs::create_dir(dir.path().join("taken")).unwrap();
    fs::write(dir.path().join("taken/keep.txt"), "x").unwrap();
    let o = ragadapt(&["run", "--config", "small.toml", "--out", "taken", "--quiet"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read_dir(dir.path().join("taken")).unwrap().count(), 1);
}

#[test]
fn invalid_config_exits_one_with_line_number() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[world]\nclasses = 4\n\n[experiment]\nshots = [1, 99]\n").unwrap();
    let o = ragadapt(&["run", "--config", "bad.toml", "--out", "x"], dir.path());
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 5:"), "{err}");
    assert!(!dir.path().join("x").exists());

    fs::write(dir.path().join("syntax.toml"), "[world]\nclasses = \n").unwrap();
    let o = ragadapt(&["verify", "--config", "syntax.toml", "--out", "x"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2:"));

    let o = ragadapt(&["run", "--config", "missing.toml", "--out", "x"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_writes_report_and_warns_on_gated_checks() {
    let dir = setup();
    fs::write(dir.path().join("mirror.toml"), SMALL.replace("\"adversarial\"", "\"mirror\"")).unwrap();
    let o = ragadapt(&["verify", "--config", "mirror.toml", "--out", "v", "--quiet"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lemma_uni_t2i not applicable"), "{err}");
    let csv = fs::read_to_string(dir.path().join("v/theory_report.csv")).unwrap();
    assert!(csv.starts_with("world,name,lhs,rhs,satisfied,applicable,params\n"));
    assert!(csv.contains(",lipschitz,"));
    assert!(dir.path().join("v/manifest.txt").exists());

    let r = ragadapt(&["report", "--out", "v"], dir.path());
    assert_eq!(code(&r), 0);
    assert!(String::from_utf8_lossy(&r.stdout).contains("theorem_ensemble"));
}

#[test]
fn gen_world_and_report() {
    let dir = setup();
    let o = ragadapt(&["gen-world", "--config", "small.toml", "--out", "w", "--quiet"], dir.path());
    assert_eq!(code(&o), 0);
    for f in ["prototypes.raeb", "text.raeb", "one_shot.raeb", "database.raeb", "manifest.txt"] {
        assert!(dir.path().join("w").join(f).exists(), "{f}");
    }
    assert_eq!(code(&ragadapt(&["report", "--out", "w"], dir.path())), 2);

    assert_eq!(code(&ragadapt(&["run", "--config", "small.toml", "--out", "r", "--quiet"], dir.path())), 0);
    let before = fs::read(dir.path().join("r/summary.csv")).unwrap();
    let rep = ragadapt(&["report", "--out", "r"], dir.path());
    assert_eq!(code(&rep), 0);
    assert!(String::from_utf8_lossy(&rep.stdout).contains("accuracy_mean"));
    assert_eq!(fs::read(dir.path().join("r/summary.csv")).unwrap(), before);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.toml", "adversarial.toml"] {
        let dir = setup();
        fs::copy(root.join(name), dir.path().join(name)).unwrap();
        // gen-world validates the whole file without running the grid
        let o = ragadapt(&["gen-world", "--config", name, "--out", "w", "--quiet"], dir.path());
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn default_config_verifies() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let dir = setup();
    let o = ragadapt(&["verify", "--config", root.to_str().unwrap(), "--out", "v", "--quiet"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
