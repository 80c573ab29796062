use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_carrynav");

fn tiny(dir: &Path, d_model: usize, mode: &str) -> String {
    format!(
        "[maze]\nwidth = 7\nheight = 7\nn_objects = 3\nwindow_radius = 1\n\n\
         [data]\nn_envs = 4\nstream_length = 100\nseed = 5\n\n\
         [model]\nd_model = {d_model}\nn_layers = 1\nn_heads = 2\nd_key = 4\nd_value = 4\n\n\
         [train]\nmode = {mode}\nsegment_length = 16\nslots = 2\nepochs = 1\nlr = 1e-3\n\n\
         [eval]\nn_envs = 2\nmax_steps = 200\ntask_cap = 50\nbucket_width = 50\nburn_in = 10\n\n\
         [paths]\ndata_dir = {d}/data\nrun_dir = {d}/run-{mode}\neval_dir = {d}/run-{mode}/eval\n",
        d = dir.display()
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn carrynav(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selfcheck_passes() {
    let o = carrynav(&["selfcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{out}");
}

#[test]
fn zero_length_streams_are_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = tiny(tmp.path(), 8, "stateful").replace("stream_length = 100", "stream_length = 0");
    let cfg = write_config(tmp.path(), "c.txt", &text);
    let o = carrynav(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=config"));
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let text = tiny(tmp.path(), 8, "stateful").replace("[data]\n", "[data]\nn_env = 3\n");
    let cfg = write_config(tmp.path(), "c.txt", &text);
    let o = carrynav(&["--config", cfg.to_str().unwrap(), "show-config"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &tiny(tmp.path(), 8, "stateful"));
    let c = cfg.to_str().unwrap();
    let a = carrynav(&["--config", c, "gen-data"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let first = std::fs::read(tmp.path().join("data/index.tsv")).unwrap();
    let refused = carrynav(&["--config", c, "gen-data"]);
    assert_ne!(code(&refused), 0);
    let b = carrynav(&["--config", c, "--force", "gen-data"]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    assert_eq!(first, std::fs::read(tmp.path().join("data/index.tsv")).unwrap());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", &tiny(tmp.path(), 8, "stateful"));
    let o = carrynav(&["--config", cfg.to_str().unwrap(), "eval"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn end_to_end_with_mismatch_and_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for mode in ["stateful", "stateless"] {
        let cfg = write_config(tmp.path(), &format!("{mode}.txt"), &tiny(tmp.path(), 8, mode));
        let c = cfg.to_str().unwrap();
        if mode == "stateful" {
            let o = carrynav(&["--config", c, "gen-data"]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        let o = carrynav(&["--config", c, "train"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = carrynav(&["--config", c, "eval"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let dir = tmp.path().join(format!("run-{mode}/eval"));
        for f in ["eval_report.json", "icl_curve.csv", "memory_norms.csv", "tasks.csv"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        reports.push(dir);
    }

    // A retrain without --force must not clobber the checkpoint.
    let c = tmp.path().join("stateful.txt");
    let o = carrynav(&["--config", c.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 2);

    let wide = write_config(tmp.path(), "wide.txt", &tiny(tmp.path(), 12, "stateful"));
    let o = carrynav(&["--config", wide.to_str().unwrap(), "eval"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=mismatch"), "{}", stderr(&o));

    let out = tmp.path().join("analysis");
    let o = carrynav(&[
        "analyze",
        reports[0].to_str().unwrap(),
        reports[1].to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = String::from_utf8_lossy(&o.stdout);
    assert!(md.contains("ΔSR") && md.contains("RSD ratio"), "{md}");
    assert!(out.join("analysis.json").exists());
}
