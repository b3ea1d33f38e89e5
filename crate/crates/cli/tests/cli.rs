use std::path::Path;
use std::process::{Command, Output};

fn avsep(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsep"))
        .env("AVSEP_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&avsep(dir.path(), &["train", "--mode", "gan"])), 1);
    assert_eq!(code(&avsep(dir.path(), &["frobnicate"])), 1);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = avsep(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&avsep(dir.path(), &["--help"])), 0);
}

#[test]
fn correlation_modes_require_pretrained_extractors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    let o = avsep(dir.path(), &["train", "--mode", "adversarial", "--steps", "1"]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("missing dependency") && msg.contains("extractors.ckpt"), "{msg}");
    assert!(msg.contains("avsep pretrain"), "{msg}");
    // the manifest is written before the dependency check fails
    assert!(dir.path().join("manifests/train-adversarial.json").exists());
}

#[test]
fn eval_without_checkpoint_is_an_artifact_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    let o = avsep(dir.path(), &["eval", "--params", "nope.ckpt"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn full_pipeline_is_deterministic_and_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, "seed = 3\nsteps = 4\neval_every = 2\nval_mixtures = 4\nbatch_size = 2\n").unwrap();
    let c = cfg.to_str().unwrap();

    let o = avsep(root, &["--config", c, "gen-data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = std::fs::read(root.join("manifests/gen-data.json")).unwrap();
    let data_manifest = std::fs::read(root.join("data/manifest.csv")).unwrap();
    let o = avsep(root, &["--config", c, "gen-data"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(root.join("manifests/gen-data.json")).unwrap(), manifest);
    assert_eq!(std::fs::read(root.join("data/manifest.csv")).unwrap(), data_manifest);

    let o = avsep(root, &["--config", c, "pretrain"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("extractors.ckpt").exists());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("extractors_report.json")).unwrap()).unwrap();
    assert!(report["speaker_audio"].as_f64().unwrap() >= 0.9);

    for mode in ["baseline", "adversarial"] {
        // flags win over the config file
        let o = avsep(root, &["--config", c, "train", "--mode", mode, "--steps", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let log = std::fs::read_to_string(root.join(format!("trainlog_{mode}.csv"))).unwrap();
        assert!(log.starts_with("# avsep trainlog"));
        assert_eq!(log.lines().count(), 2 + 3, "{log}");
    }
    assert!(root.join("discriminator_adversarial.ckpt").exists());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("manifests/train-adversarial.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["steps"], 3);
    assert_eq!(m["job"]["command"], "train");
    let outputs: Vec<String> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert!(outputs.iter().any(|p| p.ends_with("separator_adversarial.ckpt")));
    assert!(outputs.iter().any(|p| p.ends_with("trainlog_adversarial.csv")));

    let params = root.join("separator_adversarial.ckpt");
    let p = params.to_str().unwrap();
    let run_eval = |out: &str| {
        let o = avsep(root, &["--config", c, "eval", "--params", p, "--mixtures", "5", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    let a = run_eval(root.join("e1.csv").to_str().unwrap());
    let b = run_eval(root.join("e2.csv").to_str().unwrap());
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 2 + 5 + 1);
    assert!(text.lines().nth(1).unwrap() == "mixture_id,si_snr,sdr,sir,sar,stoi");
    assert!(text.lines().last().unwrap().starts_with("mean,"));

    let svg = root.join("scatter.svg");
    let o = avsep(
        root,
        &["--config", c, "scatter", "--params", p, "--mixtures", "4", "--svg", svg.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let scatter = std::fs::read_to_string(root.join("scatter_separator_adversarial.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 2 + 8);
    for line in scatter.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        assert!(f[1] == "pos" || f[1] == "neg");
        for v in &f[2..4] {
            let x: f64 = v.parse().unwrap();
            assert!((-1.0..=1.0).contains(&x));
        }
    }
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<circle"));

    // rerun the scatter job from its manifest alone
    let manifest = root.join("manifests/scatter-scatter_separator_adversarial.json");
    std::fs::remove_file(root.join("scatter_separator_adversarial.csv")).unwrap();
    let o = avsep(root, &["rerun", manifest.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(root.join("scatter_separator_adversarial.csv")).unwrap(), scatter);
}
