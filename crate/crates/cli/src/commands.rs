use std::fs;
use std::path::Path;

use roundfit::calib::{language_calib, language_tokens, load_tokens, read_token_file, CalibSet, Split};
use roundfit::model::{perplexity, toy_model, ModelConfig, ModelWeights};
use roundfit::oracle::{
    brute_force_rounding, compare_quantizers, emit_param_stats, grad_check_suite, mode_grid,
    optimizer_grid, per_block_mse, rounding_sandwich, sandwich_fixture, Variant,
};
use roundfit::qmodel::{QuantizedModel, PACKED_SUFFIX};
use roundfit::tensorfile::{load_tensors, save_tensors};
use roundfit::tuner::{tune_model, BlockReport, Method, TuneConfig};
use roundfit::{QuantConfig, Tensor};
use serde::Serialize;

use crate::args::*;
use crate::Failure;

type Res<T = ()> = Result<T, Failure>;

pub fn run(cli: Cli) -> Res {
    match cli.command {
        Command::Init(a) => init(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Oracle(a) => oracle(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Compare(a) => compare(a),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Res {
    fs::write(path, bytes).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Loads a full-precision or packed model file.
fn load_model(path: &Path) -> Res<ModelWeights<f32>> {
    let f = load_tensors(path)?;
    if f.tensors.keys().any(|k| k.ends_with(PACKED_SUFFIX)) {
        Ok(QuantizedModel::from_tensor_file(&f)?.weights)
    } else {
        Ok(ModelWeights::from_tensor_file(&f)?)
    }
}

fn resolve_model(m: &ModelArgs) -> Res<ModelWeights<f32>> {
    match (&m.model, m.init_seed) {
        (Some(path), _) => load_model(path),
        (None, Some(seed)) => Ok(toy_model(
            &ModelConfig {
                seed,
                ..ModelConfig::default()
            },
            m.train_steps,
        )?),
        (None, None) => Err(Failure::Usage("one of --model or --init-seed is required".into())),
    }
}

fn resolve_calib(c: &CalibArgs, vocab: usize, seed: u64) -> Res<CalibSet> {
    if c.calib == "synth" {
        Ok(language_calib(vocab, seed, c.seqlen, c.nsamples)?)
    } else {
        Ok(load_tokens(&c.calib, c.seqlen, c.nsamples, vocab)?)
    }
}

fn quant_config(q: &QuantArgs) -> Res<QuantConfig> {
    Ok(QuantConfig::new(q.bits, q.group_size)?)
}

fn init(a: InitArgs) -> Res {
    let cfg = ModelConfig {
        seed: a.seed,
        ..ModelConfig::default()
    };
    let m = toy_model(&cfg, a.train_steps)?;
    save_tensors(&a.out, &m.to_tensor_file()?)?;
    println!("wrote {} ({} layers, d_model {})", a.out.display(), cfg.n_layers, cfg.d_model);
    Ok(())
}

#[derive(Serialize)]
struct CalibInfo<'a> {
    source: &'a str,
    seqlen: usize,
    nsamples: usize,
}

#[derive(Serialize)]
struct QuantizeReport<'a> {
    method: Method,
    quant: String,
    seed: u64,
    tune: Option<TuneConfig>,
    calib: CalibInfo<'a>,
    blocks: &'a [BlockReport],
    bound_violations: usize,
}

fn tune_flags_given(t: &TuneArgs) -> Vec<&'static str> {
    let mut given = Vec::new();
    if t.optimizer.is_some() {
        given.push("--optimizer");
    }
    if t.steps.is_some() {
        given.push("--steps");
    }
    if t.lr.is_some() {
        given.push("--lr");
    }
    if t.clip_lr_scale.is_some() {
        given.push("--clip-lr-scale");
    }
    if t.batch_size.is_some() {
        given.push("--batch-size");
    }
    if t.tune.is_some() {
        given.push("--tune");
    }
    if t.quantized_input.is_some() {
        given.push("--quantized-input");
    }
    given
}

fn tune_config(t: &TuneArgs, seed: u64) -> TuneConfig {
    let d = TuneConfig::default();
    TuneConfig {
        steps: t.steps.unwrap_or(d.steps),
        lr: t.lr,
        batch_size: t.batch_size.unwrap_or(d.batch_size),
        optimizer: t.optimizer.unwrap_or(d.optimizer),
        mode: t.tune.unwrap_or(d.mode),
        quantized_input: t.quantized_input.unwrap_or(d.quantized_input),
        clip_lr_scale: t.clip_lr_scale.unwrap_or(d.clip_lr_scale),
        seed,
    }
}

fn quantize(a: QuantizeArgs) -> Res {
    if a.method == Method::Rtn {
        let given = tune_flags_given(&a.tune);
        if !given.is_empty() {
            return Err(Failure::Usage(format!(
                "--method rtn does not tune; {} cannot be used with it",
                given.join(", ")
            )));
        }
    }
    let qcfg = quant_config(&a.quant)?;
    let tcfg = tune_config(&a.tune, a.seed);
    if a.method == Method::SignRound {
        tcfg.validate()?;
    }
    let model = resolve_model(&a.model)?;
    let calib = resolve_calib(&a.calib, model.cfg.vocab_size, a.seed)?;
    let tuned = tune_model(&model, &calib, &qcfg, &tcfg, a.method)?;
    if tuned.bound_violations != 0 {
        return Err(Failure::Verification(format!(
            "{} tuning steps left a trainable outside its bounds",
            tuned.bound_violations
        )));
    }
    tuned.packed()?.save(&a.out)?;

    let report = QuantizeReport {
        method: a.method,
        quant: qcfg.to_string(),
        seed: a.seed,
        tune: (a.method == Method::SignRound).then_some(tcfg),
        calib: CalibInfo {
            source: &calib.source,
            seqlen: calib.seqlen,
            nsamples: calib.nsamples(),
        },
        blocks: &tuned.reports,
        bound_violations: tuned.bound_violations,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &a.report {
        Some(p) => {
            write_file(p, json + "\n")?;
            for r in &tuned.reports {
                println!(
                    "block {}: rtn_loss {:.6e} best_loss {:.6e} (step {}) tuned_loss {:.6e}",
                    r.block, r.rtn_loss, r.best_loss, r.best_step, r.tuned_loss
                );
            }
            println!("wrote {} and {}", a.out.display(), p.display());
        }
        None => println!("{json}"),
    }
    if let Some(p) = &a.param_stats {
        write_file(p, emit_param_stats(&tuned.snapshots)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    reference: String,
    tokens: String,
    n_tokens: usize,
    ppl: f64,
    block_mse: Vec<f64>,
}

fn eval(a: EvalArgs) -> Res {
    let model = load_model(&a.model)?;
    let reference = match &a.reference {
        Some(p) => load_model(p)?,
        None => model.clone(),
    };
    let vocab = model.cfg.vocab_size;
    let (tokens, source) = match &a.tokens {
        Some(p) => (read_token_file(p, vocab)?, p.display().to_string()),
        None => (
            language_tokens(vocab, Split::Heldout, a.seed, a.ntokens)?,
            format!("synth-heldout:{}", a.seed),
        ),
    };
    let ppl = perplexity(&model, &tokens)?;
    let seqlen = model.cfg.max_seq_len;
    let windows: Vec<Vec<usize>> = tokens
        .chunks_exact(seqlen)
        .take(a.windows)
        .map(<[usize]>::to_vec)
        .collect();
    if windows.is_empty() {
        return Err(Failure::Usage(format!(
            "need at least {seqlen} tokens for block reconstruction, have {}",
            tokens.len()
        )));
    }
    let block_mse = per_block_mse(&reference, &model, &windows)?;
    let report = EvalReport {
        model: a.model.display().to_string(),
        reference: a.reference.as_ref().unwrap_or(&a.model).display().to_string(),
        tokens: source,
        n_tokens: tokens.len(),
        ppl,
        block_mse,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("model      {}", report.model);
        println!("reference  {}", report.reference);
        println!("tokens     {} ({})", report.tokens, report.n_tokens);
        println!("ppl        {:.4}", report.ppl);
        println!("block  mse");
        for (i, m) in report.block_mse.iter().enumerate() {
            println!("{i:<5}  {m:.6e}");
        }
    }
    Ok(())
}

/// Slack for comparing errors computed in different summation orders.
const ORACLE_SLACK: f64 = 1e-9;

fn oracle(a: OracleArgs) -> Res {
    let (w, x) = match &a.fixture {
        Some(p) => {
            let f = load_tensors(p)?;
            let get = |name: &str| -> Res<Tensor<f64>> {
                f.get(name)
                    .and_then(|t| t.to_float::<f64>())
                    .ok_or_else(|| Failure::Usage(format!("{}: missing float tensor `{name}`", p.display())))
            };
            (get("w")?, get("x")?)
        }
        None => sandwich_fixture(a.seed),
    };
    let qcfg = QuantConfig::new(a.bits, -1)?;
    // Validate shapes before tuning so size errors surface as usage errors.
    brute_force_rounding(&w, &x, &qcfg)?;
    let tcfg = TuneConfig {
        steps: a.steps,
        seed: a.seed,
        ..TuneConfig::default()
    };
    let r = rounding_sandwich(&w, &x, &qcfg, &tcfg)?;
    let tuned = r.tuned_mse.expect("sandwich records tuned error");
    let gap = r.gap_ratio.expect("sandwich records gap");

    let mut failures = Vec::new();
    if r.optimal_mse > r.rtn_mse {
        failures.push(format!("optimal_mse {:e} > rtn_mse {:e}", r.optimal_mse, r.rtn_mse));
    }
    if r.optimal_mse > tuned + ORACLE_SLACK {
        failures.push(format!("optimal_mse {:e} > tuned_mse {tuned:e}", r.optimal_mse));
    }
    if tuned > r.rtn_mse + ORACLE_SLACK {
        failures.push(format!("tuned_mse {tuned:e} > rtn_mse {:e}", r.rtn_mse));
    }
    if let Some(max) = a.max_gap {
        if gap > max {
            failures.push(format!("gap_ratio {gap} > {max}"));
        }
    }

    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("candidates   {}", r.candidates);
        println!("optimal_mse  {:.9e}  codes {:?}", r.optimal_mse, r.optimal_codes);
        println!("rtn_mse      {:.9e}  codes {:?}", r.rtn_mse, r.rtn_codes);
        println!(
            "tuned_mse    {tuned:.9e}  codes {:?}",
            r.tuned_codes.as_deref().unwrap_or_default()
        );
        println!("gap_ratio    {gap:.9}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failures.join("; ")))
    }
}

fn gradcheck(a: GradcheckArgs) -> Res {
    let report = grad_check_suite(a.seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    if report.passed() {
        Ok(())
    } else {
        let rows: Vec<String> = report
            .failures()
            .map(|r| format!("{} (max_rel_err {:.3e})", r.name, r.max_rel_err))
            .collect();
        Err(Failure::Verification(rows.join(", ")))
    }
}

fn compare(a: CompareArgs) -> Res {
    let qcfg = quant_config(&a.quant)?;
    let d = TuneConfig::default();
    let base = TuneConfig {
        steps: a.steps.unwrap_or(d.steps),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        clip_lr_scale: a.clip_lr_scale.unwrap_or(d.clip_lr_scale),
        quantized_input: a.quantized_input.unwrap_or(d.quantized_input),
        seed: a.seed,
        ..d
    };
    base.validate()?;
    let variants = match &a.grid {
        Some(g) => Variant::parse_grid(g, &base)?,
        None => match a.preset.as_str() {
            "optimizer" => optimizer_grid(&base),
            "mode" => mode_grid(&base),
            "all" => {
                let mut v = optimizer_grid(&base);
                v.extend(mode_grid(&base));
                v
            }
            other => {
                return Err(Failure::Usage(format!(
                    "unknown preset `{other}` (optimizer, mode, all)"
                )))
            }
        },
    };
    let model = resolve_model(&a.model)?;
    let vocab = model.cfg.vocab_size;
    let calib = resolve_calib(&a.calib, vocab, a.seed)?;
    let heldout = language_tokens(vocab, Split::Heldout, a.seed, a.heldout_tokens)?;
    let report = compare_quantizers(&model, &calib, &heldout, &qcfg, &variants)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_file(p, report.to_json()? + "\n")?;
    }
    Ok(())
}
