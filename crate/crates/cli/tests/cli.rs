use std::path::Path;
use std::process::{Command, Output};

use roundfit::{save_tensors, Tensor, TensorFile};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roundfit"))
        .args(args)
        .env("RF_THREADS", "2")
        .output()
        .expect("spawn roundfit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("bad json ({e}): {}", String::from_utf8_lossy(&o.stdout))
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_bad_args() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["quantize", "--help"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    // --bits outside {2,3,4,8}
    assert_eq!(code(&run(&["quantize", "--init-seed", "0", "--bits", "5", "--out", "x"])), 1);
    // neither --model nor --init-seed
    assert_eq!(code(&run(&["quantize", "--out", "x"])), 1);
}

#[test]
fn rtn_rejects_tuning_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.rft");
    let o = run(&[
        "quantize", "--init-seed", "0", "--train-steps", "0", "--method", "rtn", "--steps", "10",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn missing_model_file_is_usage_error() {
    let o = run(&["eval", "--model", "/nonexistent/model.rft"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_exits_zero() {
    let o = run(&["gradcheck", "--seed", "1", "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v = stdout_json(&o);
    assert!(v["rows"].as_array().unwrap().len() > 10);
}

#[test]
fn oracle_on_grid_row_has_zero_error() {
    // Scale (0.25 + 0.5) / 3 = 0.25 and every weight sits on that grid.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.rft");
    let w = vec![-0.5, -0.25, 0.0, 0.25, 0.25, 0.0, -0.25, -0.5];
    let x: Vec<f64> = (0..8 * 4).map(|i| (i % 7) as f64 - 3.0).collect();
    let mut f = TensorFile::new();
    f.insert("w", Tensor::new([1, 8], w).unwrap());
    f.insert("x", Tensor::new([8, 4], x).unwrap());
    save_tensors(&path, &f).unwrap();

    let o = run(&["oracle", "--fixture", s(&path), "--steps", "50", "--json"]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    assert_eq!(v["optimal_mse"].as_f64(), Some(0.0));
    assert_eq!(v["rtn_mse"].as_f64(), Some(0.0));
    assert_eq!(v["tuned_mse"].as_f64(), Some(0.0));
    assert_eq!(v["candidates"].as_u64(), Some(256));
}

#[test]
fn oracle_gap_limit_is_enforced() {
    assert_eq!(code(&run(&["oracle", "--seed", "1", "--steps", "300"])), 0);
    // No rounding beats the exhaustive optimum, so a ratio below 1 always fails.
    assert_eq!(code(&run(&["oracle", "--seed", "1", "--steps", "300", "--max-gap", "0.5"])), 2);
}

#[test]
fn oracle_oversized_fixture_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.rft");
    let mut f = TensorFile::new();
    f.insert("w", Tensor::<f64>::zeros([1, 20]));
    f.insert("x", Tensor::<f64>::zeros([20, 2]));
    save_tensors(&path, &f).unwrap();
    assert_eq!(code(&run(&["oracle", "--fixture", s(&path)])), 1);
}

#[test]
fn quantize_eval_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let fp = dir.path().join("fp.rft");
    let o = run(&["init", "--seed", "3", "--train-steps", "20", "--out", s(&fp)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let quantize = |name: &str| {
        let out = dir.path().join(format!("{name}.rft"));
        let report = dir.path().join(format!("{name}.json"));
        let o = run(&[
            "quantize", "--model", s(&fp), "--bits", "2", "--group-size", "32", "--steps", "5",
            "--nsamples", "8", "--seed", "4", "--out", s(&out), "--report", s(&report),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(out).unwrap(), std::fs::read(report).unwrap())
    };
    let (a_bin, a_rep) = quantize("a");
    let (b_bin, b_rep) = quantize("b");
    assert_eq!(a_bin, b_bin);
    assert_eq!(a_rep, b_rep);

    let rep: serde_json::Value = serde_json::from_slice(&a_rep).unwrap();
    assert!(!rep.to_string().is_empty());

    let q = dir.path().join("a.rft");
    let o = run(&["eval", "--model", s(&q), "--reference", s(&fp), "--ntokens", "2000", "--json"]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    assert!(v["ppl"].as_f64().unwrap() > 1.0);
    assert!(v["block_mse"].as_array().unwrap().iter().all(|m| m.as_f64().unwrap() > 0.0));

    let o = run(&["eval", "--model", s(&fp), "--ntokens", "2000", "--json"]);
    let v = stdout_json(&o);
    assert!(v["block_mse"].as_array().unwrap().iter().all(|m| m.as_f64() == Some(0.0)));
}

#[test]
fn compare_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("cmp.json");
    let o = run(&[
        "compare", "--init-seed", "0", "--train-steps", "10", "--bits", "2", "--group-size", "32",
        "--grid", "rtn,adam:1e-2", "--steps", "5", "--nsamples", "8", "--heldout-tokens", "1000",
        "--json", s(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["method"], "rtn");
    assert_eq!(rows[1]["optimizer"], "adam");

    let bad = run(&["compare", "--init-seed", "0", "--grid", "sgd:1e-2"]);
    assert_eq!(code(&bad), 1);
}
