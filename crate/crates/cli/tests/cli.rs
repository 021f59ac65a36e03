use std::fs;
use std::path::Path;

use dmfseg_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("dmfseg").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage() {
    let (code, _, err) = call(&[]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage: dmfseg"));
    assert!(err.contains("gradcheck"));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["frobnicate"][..],
        &["count", "--res", "abc"],
        &["gradcheck", "--module", "mlp"],
        &["ablate", "--axis", "depth"],
        &["gen-data", "--camera", "orthographic"],
    ] {
        let (code, _, err) = call(args);
        assert_eq!(code, EXIT_USAGE, "{args:?}: {err}");
    }
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("Usage"));
}

#[test]
fn count_reports_targets() {
    let (code, out, _) = call(&["count", "--channels", "96,192,384,768", "--res", "512"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("published (vmamba-t widths): 11.2 M params, 6.0 G FLOPs"), "{out}");
    assert!(out.contains("computed:"));
    assert!(out.contains("reductions versus published heads"));
    let (_, again, _) = call(&["count", "--channels", "96,192,384,768", "--res", "512"]);
    assert_eq!(out, again);
    let (code, _, _) = call(&["count", "--channels", "96,192,384"]);
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn gradcheck_passes_for_dmf() {
    let (code, out, _) = call(&["gradcheck", "--module", "dmf", "--eps", "1e-5"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("dmf") && out.contains("max relative error") && out.contains("PASS"), "{out}");
    let (code, _, _) = call(&["gradcheck", "--eps", "0"]);
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 1\nunknown_key = 3\n").unwrap();
    let (code, _, err) = call(&["count", "--config", p(&cfg)]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("unknown_key"), "{err}");
    let (code, _, _) = call(&["train", "--config", p(&dir.path().join("missing.toml"))]);
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn generate_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[data]\nheight = 32\nwidth = 64\n\n[train]\nwarmup = 2\n").unwrap();
    let data = dir.path().join("data");
    let (code, out, err) = call(&["gen-data", "--config", p(&cfg), "--samples", "5", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("wrote 5 samples (4 train, 1 val)"), "{out}");

    let run_dir = |name: &str| dir.path().join(name);
    for name in ["a", "b"] {
        let (code, out, err) = call(&[
            "train", "--config", p(&cfg), "--data", p(&data), "--iters", "3", "--seed", "5", "--out", p(&run_dir(name)),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(out.contains("trained 3 iterations"));
    }
    let log = fs::read_to_string(run_dir("a").join("loss.log")).unwrap();
    assert_eq!(log.lines().next(), Some("iter, lr, loss"));
    assert_eq!(log.lines().count(), 4);
    assert_eq!(log, fs::read_to_string(run_dir("b").join("loss.log")).unwrap());
    assert_eq!(fs::read(run_dir("a").join("model.ckpt")).unwrap(), fs::read(run_dir("b").join("model.ckpt")).unwrap());

    let ckpt = run_dir("a").join("model.ckpt");
    let (code, out, err) =
        call(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&run_dir("a"))]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("mean") && out.contains("aAcc"));
    let kv = fs::read_to_string(run_dir("a").join("metrics.txt")).unwrap();
    assert!(kv.starts_with("miou="));

    // A model with a different class count cannot score this dataset.
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model.decoder]\nnum_classes = 3\n").unwrap();
    let (code, _, _) = call(&["eval", "--config", p(&bad), "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code, EXIT_RUNTIME);

    let (code, _, err) = call(&["ablate", "--axis", "deformable", "--seeds", "0,1", "--data", p(&data)]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("at least 3 seeds"));
}
