use roundfit::calib::{language_calib, language_tokens, Split};
use roundfit::model::{perplexity, toy_model};
use roundfit::oracle::{compare_quantizers, emit_param_stats, per_block_mse, Variant};
use roundfit::qmodel::QuantizedModel;
use roundfit::tuner::{params_in_bounds, tune_model, Method, TuneConfig, TuneMode};
use roundfit::{Error, ModelConfig, QuantConfig, TensorFile};

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 48,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        max_seq_len: 16,
        seed: 5,
    }
}

#[test]
fn quantize_save_load_eval() {
    let cfg = small();
    let model = toy_model(&cfg, 30).unwrap();
    let calib = language_calib(cfg.vocab_size, 1, 16, 16).unwrap();
    let qcfg = QuantConfig::new(3, 8).unwrap();
    let tcfg = TuneConfig { steps: 30, ..TuneConfig::default() };
    let tuned = tune_model(&model, &calib, &qcfg, &tcfg, Method::SignRound).unwrap();
    assert_eq!(tuned.bound_violations, 0);
    for snap in &tuned.snapshots {
        assert!(snap.params.iter().all(params_in_bounds));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.rft");
    tuned.packed().unwrap().save(&path).unwrap();
    let back = QuantizedModel::load(&path).unwrap();
    assert_eq!(back.weights, tuned.dequantized);

    let heldout = language_tokens(cfg.vocab_size, Split::Heldout, 1, 400).unwrap();
    let ppl = perplexity(&back.weights, &heldout).unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    let windows: Vec<Vec<usize>> = heldout.chunks(16).take(4).map(<[usize]>::to_vec).collect();
    let mse = per_block_mse(&model, &back.weights, &windows).unwrap();
    assert!(mse.iter().all(|&m| m > 0.0 && m.is_finite()));
}

#[test]
fn rtn_method_reports_no_gain() {
    let cfg = small();
    let model = toy_model(&cfg, 0).unwrap();
    let calib = language_calib(cfg.vocab_size, 2, 16, 8).unwrap();
    let t = tune_model(&model, &calib, &QuantConfig::new(2, 8).unwrap(), &TuneConfig::default(), Method::Rtn).unwrap();
    for r in &t.reports {
        assert_eq!(r.tuned_loss, r.rtn_loss);
        assert_eq!(r.steps, 0);
    }
    for s in &t.snapshots {
        for p in &s.params {
            assert!(p.v.data().iter().all(|&v| v == 0.0));
            assert!(p.alpha.data().iter().chain(p.beta.data()).all(|&v| v == 1.0));
        }
    }
    let csv = emit_param_stats(&t.snapshots).unwrap();
    // Untouched parameters: |V| all in bin 0, alpha and beta all in the top bin.
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let count: u64 = f[5].parse().unwrap();
        let bin: usize = f[2].parse().unwrap();
        let expect_mass = match f[1] {
            "abs_v" => bin == 0,
            _ => bin == 31,
        };
        assert_eq!(count > 0, expect_mass, "{line}");
    }
}

#[test]
fn comparison_rows_follow_variants() {
    let cfg = small();
    let model = toy_model(&cfg, 20).unwrap();
    let calib = language_calib(cfg.vocab_size, 3, 16, 8).unwrap();
    let heldout = language_tokens(cfg.vocab_size, Split::Heldout, 3, 200).unwrap();
    let base = TuneConfig { steps: 20, ..TuneConfig::default() };
    let variants = Variant::parse_grid("rtn,signsgd:5e-3,adam:1e-2,signsgd:5e-3:clip", &base).unwrap();
    let qcfg = QuantConfig::new(2, 8).unwrap();
    let r = compare_quantizers(&model, &calib, &heldout, &qcfg, &variants).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.rows[0].tuned_loss, r.rows[0].rtn_loss);
    assert_eq!(r.rows[0].ppl_tuned, r.rows[0].ppl_rtn);
    assert_eq!(r.rows[3].mode, TuneMode::Clip.to_string());
    for row in &r.rows {
        assert_eq!(row.ppl_fp, r.rows[0].ppl_fp);
        assert_eq!(row.block_rtn_loss.len(), 2);
    }
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
    assert_eq!(r.to_text().lines().count(), 5);
    assert!(compare_quantizers(&model, &calib, &heldout, &qcfg, &[]).is_err());
}

#[test]
fn corrupt_container_is_a_format_error() {
    let cfg = small();
    let model = toy_model(&cfg, 0).unwrap();
    let calib = language_calib(cfg.vocab_size, 0, 16, 4).unwrap();
    let t = tune_model(&model, &calib, &QuantConfig::new(4, 8).unwrap(), &TuneConfig { steps: 2, ..TuneConfig::default() }, Method::SignRound).unwrap();
    let bytes = t.packed().unwrap().to_bytes().unwrap();
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(TensorFile::from_bytes(cut), Err(Error::Format { .. })));
}
