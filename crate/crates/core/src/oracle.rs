//! Independent checks: exhaustive rounding search, finite-difference
//! gradient checks, and the quantizer comparison report.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::calib::{BlockInputCache, CalibSet};
use crate::error::{arg_err, dim_err, Result};
use crate::model::{block_apply, perplexity, BlockVars, ModelWeights, LN_EPS};
use crate::quant::{compute_scale_zp, qdq_tape, quantize, rtn, QuantConfig, TunedParams, CLIP_SCALE_MIN, S_MIN};
use crate::tensor::{Scalar, Tensor};
use crate::tuner::{
    tune_block, tune_model, BestSnapshot, LinearLayer, Method, OptimizerKind, TuneConfig, TuneMode,
    V_BOUND,
};

/// Largest row length the exhaustive search accepts.
pub const MAX_BRUTE_FORCE: usize = 16;

/// Exhaustive rounding search for a single weight row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub optimal_codes: Vec<u8>,
    pub optimal_mse: f64,
    pub rtn_codes: Vec<u8>,
    pub rtn_mse: f64,
    /// Number of code vectors enumerated, `2ⁿ`.
    pub candidates: usize,
    pub tuned_codes: Option<Vec<u8>>,
    pub tuned_mse: Option<f64>,
    /// `tuned_mse / optimal_mse`, or 1 when the optimum is exact.
    pub gap_ratio: Option<f64>,
}

impl OracleResult {
    /// Records a tuned code vector and derives its gap to the optimum.
    pub fn with_tuned(mut self, codes: Vec<u8>, mse: f64) -> Self {
        self.gap_ratio = Some(if self.optimal_mse == 0.0 {
            1.0
        } else {
            mse / self.optimal_mse
        });
        self.tuned_codes = Some(codes);
        self.tuned_mse = Some(mse);
        self
    }
}

/// Output MSE of `w̃ · x` against `w · x` for codes at fixed `s`, `zp`.
fn row_output_mse(w: &[f64], x: &[f64], b: usize, codes: &[u8], s: f64, zp: f64) -> f64 {
    let mut total = 0.0;
    for j in 0..b {
        let mut d = 0.0;
        for (i, (&wi, &q)) in w.iter().zip(codes).enumerate() {
            d += (s * (q as f64 - zp) - wi) * x[i * b + j];
        }
        total += d * d;
    }
    total / b as f64
}

/// Enumerates every floor/ceil choice of the codes of `w` (`[1, n]`, one
/// group) around `w/s + zp` at `α = β = 1` and returns the one minimizing
/// the output error on `x` (`[n, b]`). Ties go to the lexicographically
/// smallest code vector.
pub fn brute_force_rounding<T: Scalar>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    qcfg: &QuantConfig,
) -> Result<OracleResult> {
    qcfg.validate()?;
    let (ws, xs) = (w.shape(), x.shape());
    if ws.len() != 2 || ws[0] != 1 || xs.len() != 2 || xs[0] != ws[1] {
        return Err(dim_err(format!(
            "brute force expects w [1, n] and x [n, b], got {ws:?} and {xs:?}"
        )));
    }
    let n = ws[1];
    if n > MAX_BRUTE_FORCE {
        return Err(dim_err(format!(
            "brute force refuses n = {n} (at most {MAX_BRUTE_FORCE})"
        )));
    }
    if qcfg.effective_group_size(n) < n {
        return Err(arg_err("brute force needs the row in a single group"));
    }
    let b = xs[1];
    let p = compute_scale_zp(w.data(), qcfg, T::one(), T::one());
    let (s, zp) = (p.scale, T::from_u16(p.zp).unwrap());
    let maxq = qcfg.max_code() as f64;
    let (lo, hi): (Vec<u8>, Vec<u8>) = w
        .data()
        .iter()
        .map(|&wi| {
            let c = (wi / s + zp).as_f64();
            (c.floor().clamp(0.0, maxq) as u8, c.ceil().clamp(0.0, maxq) as u8)
        })
        .unzip();

    let w64: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let x64: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let (s64, zp64) = (s.as_f64(), zp.as_f64());
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut codes = vec![0u8; n];
    for mask in 0u32..(1u32 << n) {
        for i in 0..n {
            codes[i] = if mask >> i & 1 == 1 { hi[i] } else { lo[i] };
        }
        let mse = row_output_mse(&w64, &x64, b, &codes, s64, zp64);
        let better = match &best {
            None => true,
            Some((m, c)) => mse < *m || (mse == *m && codes < *c),
        };
        if better {
            best = Some((mse, codes.clone()));
        }
    }
    let (optimal_mse, optimal_codes) = best.expect("at least one candidate");
    let rtn_codes = rtn(w, qcfg)?.codes;
    let rtn_mse = row_output_mse(&w64, &x64, b, &rtn_codes, s64, zp64);
    Ok(OracleResult {
        optimal_codes,
        optimal_mse,
        rtn_codes,
        rtn_mse,
        candidates: 1usize << n,
        tuned_codes: None,
        tuned_mse: None,
        gap_ratio: None,
    })
}

/// Runs the exhaustive search, then tunes `V` alone on the same data (full
/// batch) and scores the tuned codes with the oracle's own error measure.
pub fn rounding_sandwich(
    w: &Tensor<f64>,
    x: &Tensor<f64>,
    qcfg: &QuantConfig,
    tcfg: &TuneConfig,
) -> Result<OracleResult> {
    let oracle = brute_force_rounding(w, x, qcfg)?;
    let layer = LinearLayer { weight: w.clone() };
    let cache = BlockInputCache {
        block_idx: 0,
        quantized_prior: false,
        inputs: vec![x.transpose()?],
    };
    let tcfg = TuneConfig {
        mode: TuneMode::Rounding,
        batch_size: 1,
        ..*tcfg
    };
    let out = tune_block(&layer, &cache, qcfg, &tcfg)?;
    let tuned = quantize(w, qcfg, &out.snapshot.params[0])?;
    let p = compute_scale_zp(w.data(), qcfg, 1.0, 1.0);
    let mse = row_output_mse(w.data(), x.data(), x.shape()[1], &tuned.codes, p.scale, p.zp as f64);
    Ok(oracle.with_tuned(tuned.codes, mse))
}

/// The seeded `1 × 8` row and `8 × 16` inputs used for the optimality
/// sandwich.
pub fn sandwich_fixture(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn([1, 8], 1.0, &mut rng);
    let x = Tensor::randn([8, 16], 1.0, &mut rng);
    (w, x)
}

// ---- finite-difference gradient checks ---------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    /// Largest `|analytic − numeric|`, divided by the largest gradient
    /// magnitude of the same input.
    pub max_rel_err: f64,
    /// Number of scalar partials compared.
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<w$}  {:>12}  {:>7}  status\n", "op", "max_rel_err", "checked");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>12.3e}  {:>7}  {}",
                r.name,
                r.max_rel_err,
                r.checked,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

struct FdCase<'a> {
    name: &'a str,
    inputs: Vec<Tensor<f64>>,
    /// Which inputs are differentiated.
    wrt: Vec<bool>,
    surrogate: bool,
    build: &'a Build<'a>,
}

fn fresh_tape(surrogate: bool) -> Tape<f64> {
    if surrogate {
        Tape::surrogate()
    } else {
        Tape::new()
    }
}

/// `Σ out ⊙ r`, turning any output into a scalar with non-trivial upstream
/// gradient.
fn projected(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

fn eval_loss(case: &FdCase, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut tape = fresh_tape(case.surrogate);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = projected(&mut tape, out, r)?;
    Ok(tape.value(loss).data()[0])
}

fn run_fd(case: FdCase, rng: &mut ChaCha8Rng) -> Result<GradCheckRow> {
    let mut tape = fresh_tape(case.surrogate);
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.wrt)
        .map(|(t, &g)| if g { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let r = Tensor::uniform(tape.shape(out).to_vec(), -1.0, 1.0, rng);
    let loss = projected(&mut tape, out, &r)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut inputs = case.inputs.clone();
    for (k, &wrt) in case.wrt.iter().enumerate() {
        if !wrt {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[k], &case.inputs[k]);
        let mut numeric = Vec::with_capacity(analytic.numel());
        for i in 0..analytic.numel() {
            let orig = case.inputs[k].data()[i];
            inputs[k] = with_element(&case.inputs[k], i, orig + FD_STEP)?;
            let up = eval_loss(&case, &inputs, &r)?;
            inputs[k] = with_element(&case.inputs[k], i, orig - FD_STEP)?;
            let down = eval_loss(&case, &inputs, &r)?;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        inputs[k] = case.inputs[k].clone();
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
        checked += numeric.len();
    }
    Ok(GradCheckRow {
        name: case.name.to_string(),
        max_rel_err: worst,
        checked,
        passed: worst <= FD_TOLERANCE && worst.is_finite(),
    })
}

fn with_element(t: &Tensor<f64>, i: usize, v: f64) -> Result<Tensor<f64>> {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.shape().to_vec(), d)
}

fn exact_row(name: &str, max_err: f64, checked: usize) -> GradCheckRow {
    GradCheckRow {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
        passed: max_err == 0.0,
    }
}

/// Uniform samples in `[lo, hi)` kept at least `margin` away from each of
/// `avoid`.
fn uniform_avoiding(
    shape: &[usize],
    lo: f64,
    hi: f64,
    avoid: &[f64],
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(lo..hi);
            if avoid.iter().all(|a| (v - a).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Draws `(W, V, α, β)` for the quantizer check such that under the
/// surrogate every scale, zero point, and code sits clear of its clip
/// boundaries.
fn qdq_interior_point(qcfg: &QuantConfig, rng: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
    let (rows, cols) = (4, 12);
    let gs = qcfg.effective_group_size(cols);
    let groups = cols.div_ceil(gs);
    let maxq = qcfg.max_code() as f64;
    let margin = 1e-2;
    loop {
        let w = Tensor::uniform([rows, cols], -2.0, 2.0, rng);
        let v = Tensor::uniform([rows, cols], -0.3, 0.3, rng);
        let a = Tensor::uniform([rows, groups], 0.7, 0.95, rng);
        let b = Tensor::uniform([rows, groups], 0.7, 0.95, rng);
        let mut ok = true;
        'outer: for r in 0..rows {
            for g in 0..groups {
                let span = &w.data()[r * cols + g * gs..(r * cols + (g + 1) * gs).min((r + 1) * cols)];
                let wmax = span.iter().copied().fold(0.0f64, f64::max);
                let wmin = span.iter().copied().fold(0.0f64, f64::min);
                let (al, be) = (a.data()[r * groups + g], b.data()[r * groups + g]);
                let s = (wmax * al - wmin * be) / maxq;
                let zp = -wmin * be / s;
                if s < 10.0 * S_MIN.max(1e-3) || zp < margin || zp > maxq - margin {
                    ok = false;
                    break 'outer;
                }
                for (c, &wi) in span.iter().enumerate() {
                    let code: f64 = wi / s + zp + v.data()[r * cols + g * gs + c];
                    if code.abs() < margin || (code - maxq).abs() < margin {
                        ok = false;
                        break 'outer;
                    }
                }
            }
        }
        if ok {
            return [w, v, a, b];
        }
    }
}

/// Central-difference checks (`f64`, `h = 1e-5`) of every differentiable
/// tape op, the quantizer with respect to `V`, `α`, `β` (rounding treated
/// as identity, interior points), and a whole toy block; plus exact checks
/// of the straight-through backward rules.
pub fn grad_check_suite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(shape.to_vec(), -2.0, 2.0, rng);

    macro_rules! fd {
        ($name:expr, [$($inp:expr),+], $surrogate:expr, |$t:ident, $v:ident| $body:expr) => {{
            let inputs: Vec<Tensor<f64>> = vec![$($inp),+];
            let wrt = vec![true; inputs.len()];
            let build = |$t: &mut Tape<f64>, $v: &[Var]| -> Result<Var> { $body };
            rows.push(run_fd(FdCase { name: $name, inputs, wrt, surrogate: $surrogate, build: &build }, &mut rng)?);
        }};
    }

    fd!("add", [u(&[3, 4], &mut rng), u(&[3, 4], &mut rng)], false, |t, v| t.add(v[0], v[1]));
    fd!("add (broadcast)", [u(&[2, 3, 4], &mut rng), u(&[4], &mut rng)], false, |t, v| t.add(v[0], v[1]));
    fd!("sub", [u(&[3, 4], &mut rng), u(&[3, 4], &mut rng)], false, |t, v| t.sub(v[0], v[1]));
    fd!("sub (broadcast)", [u(&[3, 4], &mut rng), u(&[4], &mut rng)], false, |t, v| t.sub(v[0], v[1]));
    fd!("mul", [u(&[3, 4], &mut rng), u(&[3, 4], &mut rng)], false, |t, v| t.mul(v[0], v[1]));
    fd!("mul (broadcast)", [u(&[2, 3, 4], &mut rng), u(&[3, 4], &mut rng)], false, |t, v| t.mul(v[0], v[1]));
    let den = Tensor::uniform([3, 4], 0.5, 2.0, &mut rng);
    fd!("div", [u(&[3, 4], &mut rng), den], false, |t, v| t.div(v[0], v[1]));
    let den = Tensor::uniform([4], 0.5, 2.0, &mut rng);
    fd!("div (broadcast)", [u(&[3, 4], &mut rng), den], false, |t, v| t.div(v[0], v[1]));
    fd!("scale", [u(&[3, 4], &mut rng)], false, |t, v| t.scale(v[0], -1.7));
    fd!("sum", [u(&[3, 4], &mut rng)], false, |t, v| t.sum(v[0]));
    fd!("reshape", [u(&[3, 4], &mut rng)], false, |t, v| t.reshape(v[0], [2, 6]));
    fd!("transpose", [u(&[3, 4], &mut rng)], false, |t, v| t.transpose(v[0]));
    fd!("split_heads", [u(&[2, 3, 4], &mut rng)], false, |t, v| t.split_heads(v[0], 2));
    fd!("merge_heads", [u(&[4, 3, 2], &mut rng)], false, |t, v| t.merge_heads(v[0], 2));
    fd!("expand_groups", [u(&[2, 3], &mut rng)], false, |t, v| t.expand_groups(v[0], 3, 8));
    fd!("gather_rows", [u(&[5, 3], &mut rng)], false, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
    fd!("matmul", [u(&[3, 4], &mut rng), u(&[4, 5], &mut rng)], false, |t, v| t.matmul(v[0], v[1]));
    fd!("matmul (batched)", [u(&[2, 3, 4], &mut rng), u(&[2, 4, 5], &mut rng)], false, |t, v| t.matmul(v[0], v[1]));
    fd!("matmul_t (linear)", [u(&[2, 3, 4], &mut rng), u(&[5, 4], &mut rng)], false, |t, v| t.matmul_t(v[0], v[1]));
    fd!("matmul_t (batched)", [u(&[2, 3, 4], &mut rng), u(&[2, 5, 4], &mut rng)], false, |t, v| t.matmul_t(v[0], v[1]));
    fd!("softmax", [u(&[3, 5], &mut rng)], false, |t, v| t.softmax_lastdim(v[0]));
    fd!("causal_mask + softmax", [u(&[2, 4, 4], &mut rng)], false, |t, v| {
        let m = t.causal_mask(v[0])?;
        t.softmax_lastdim(m)
    });
    fd!(
        "layer_norm",
        [u(&[2, 3, 6], &mut rng), u(&[6], &mut rng), u(&[6], &mut rng)],
        false,
        |t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS)
    );
    fd!("gelu", [u(&[3, 4], &mut rng)], false, |t, v| t.gelu(v[0]));
    fd!("round_ste (surrogate)", [u(&[3, 4], &mut rng)], true, |t, v| t.round_ste(v[0]));
    let interior = uniform_avoiding(&[3, 4], -2.0, 2.0, &[-1.0, 1.0], 1e-2, &mut rng);
    fd!("clip_ste", [interior], false, |t, v| t.clip_ste(v[0], -1.0, 1.0));
    fd!("mse_loss", [u(&[3, 4], &mut rng), u(&[3, 4], &mut rng)], false, |t, v| t.mse_loss(v[0], v[1]));
    let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    fd!("cross_entropy", [u(&[4, 6], &mut rng)], false, |t, v| t.cross_entropy(v[0], &targets));

    for qcfg in [QuantConfig::new(3, 5)?, QuantConfig::new(4, -1)?, QuantConfig::new(2, 4)?] {
        let [w, v, a, b] = qdq_interior_point(&qcfg, &mut rng);
        let name = format!("qdq {qcfg} wrt V, alpha, beta");
        let build = |t: &mut Tape<f64>, vs: &[Var]| qdq_tape(t, &w, &qcfg, vs[0], vs[1], vs[2]);
        rows.push(run_fd(
            FdCase {
                name: &name,
                inputs: vec![v, a, b],
                wrt: vec![true; 3],
                surrogate: true,
                build: &build,
            },
            &mut rng,
        )?);
    }

    rows.push(block_check(&mut rng)?);
    rows.extend(exact_ste_rows(&mut rng)?);

    Ok(GradCheckReport {
        seed,
        step: FD_STEP,
        tolerance: FD_TOLERANCE,
        rows,
    })
}

fn block_check(rng: &mut ChaCha8Rng) -> Result<GradCheckRow> {
    let (d, ff, heads) = (8, 16, 2);
    let mut inputs = vec![Tensor::uniform([2, 4, d], -2.0, 2.0, rng)];
    for _ in 0..2 {
        inputs.push(Tensor::uniform([d], 0.5, 1.5, rng));
        inputs.push(Tensor::uniform([d], -0.5, 0.5, rng));
    }
    for shape in [[d, d], [d, d], [d, d], [d, d], [ff, d], [d, ff]] {
        inputs.push(Tensor::randn(shape, 0.3, rng));
    }
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let vars = BlockVars {
            ln1_gamma: v[1],
            ln1_beta: v[2],
            ln2_gamma: v[3],
            ln2_beta: v[4],
            linears: [v[5], v[6], v[7], v[8], v[9], v[10]],
        };
        block_apply(t, &vars, v[0], heads)
    };
    let wrt = vec![true; inputs.len()];
    run_fd(
        FdCase {
            name: "toy block",
            inputs,
            wrt,
            surrogate: false,
            build: &build,
        },
        rng,
    )
}

/// `round_ste` must pass the upstream gradient through unchanged, `clip_ste`
/// must apply exactly the inclusive interior mask, and `mse(x, x)` must have
/// zero gradient.
fn exact_ste_rows(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckRow>> {
    let x = Tensor::<f64>::uniform([4, 6], -3.0, 3.0, rng);
    let r = Tensor::<f64>::uniform([4, 6], -1.0, 1.0, rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = tape.round_ste(xv)?;
    let loss = projected(&mut tape, y, &r)?;
    let g = tape.backward(loss)?.get_or_zeros(xv, &x);
    let round_err = g.max_abs_diff(&r).unwrap_or(f64::INFINITY);

    let mut data = x.data().to_vec();
    data[0] = -1.0;
    data[1] = 1.0;
    let x = Tensor::new([4, 6], data)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = tape.clip_ste(xv, -1.0, 1.0)?;
    let loss = projected(&mut tape, y, &r)?;
    let g = tape.backward(loss)?.get_or_zeros(xv, &x);
    let want = Tensor::new(
        [4, 6],
        x.data()
            .iter()
            .zip(r.data())
            .map(|(&v, &ri)| if (-1.0..=1.0).contains(&v) { ri } else { 0.0 })
            .collect(),
    )?;
    let clip_err = g.max_abs_diff(&want).unwrap_or(f64::INFINITY);

    let mut tape = Tape::new();
    let a = tape.leaf(x.clone());
    let b = tape.leaf(x.clone());
    let loss = tape.mse_loss(a, b)?;
    let grads = tape.backward(loss)?;
    let mse_err = grads
        .get_or_zeros(a, &x)
        .data()
        .iter()
        .chain(grads.get_or_zeros(b, &x).data())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(vec![
        exact_row("round_ste backward is identity", round_err, 24),
        exact_row("clip_ste backward is interior mask", clip_err, 24),
        exact_row("mse(x, x) gradient is zero", mse_err, 48),
    ])
}

// ---- quantizer comparison ------------------------------------------------

/// One configuration in a comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub tcfg: TuneConfig,
}

impl Variant {
    pub fn rtn(base: &TuneConfig) -> Self {
        Self {
            label: "rtn".into(),
            method: Method::Rtn,
            tcfg: *base,
        }
    }

    pub fn tuned(label: impl Into<String>, tcfg: TuneConfig) -> Self {
        Self {
            label: label.into(),
            method: Method::SignRound,
            tcfg,
        }
    }

    /// Parses `optimizer:lr[:mode]` items separated by commas, or `rtn`,
    /// e.g. `signsgd:5e-3,adam:1e-2,signsgd:5e-3:rounding`.
    pub fn parse_grid(grid: &str, base: &TuneConfig) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for item in grid.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item.eq_ignore_ascii_case("rtn") {
                out.push(Variant::rtn(base));
                continue;
            }
            let parts: Vec<&str> = item.split(':').collect();
            if !(2..=3).contains(&parts.len()) {
                return Err(arg_err(format!(
                    "grid item `{item}` is not optimizer:lr[:mode] or rtn"
                )));
            }
            let optimizer: OptimizerKind = parts[0].parse()?;
            let lr: f64 = parts[1]
                .parse()
                .map_err(|_| arg_err(format!("bad learning rate `{}` in `{item}`", parts[1])))?;
            let mode: TuneMode = match parts.get(2) {
                Some(m) => m.parse()?,
                None => base.mode,
            };
            let tcfg = TuneConfig {
                optimizer,
                lr: Some(lr),
                mode,
                ..*base
            };
            tcfg.validate()?;
            out.push(Variant::tuned(item, tcfg));
        }
        if out.is_empty() {
            return Err(arg_err("empty comparison grid"));
        }
        Ok(out)
    }
}

/// Learning rates of the optimizer comparison.
pub const OPTIMIZER_GRID_LRS: [f64; 4] = [2.5e-3, 5e-3, 1e-2, 2e-2];

/// SignSGD and Adam at each of [`OPTIMIZER_GRID_LRS`].
pub fn optimizer_grid(base: &TuneConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for optimizer in [OptimizerKind::SignSgd, OptimizerKind::Adam] {
        for lr in OPTIMIZER_GRID_LRS {
            let tcfg = TuneConfig {
                optimizer,
                lr: Some(lr),
                ..*base
            };
            out.push(Variant::tuned(format!("{optimizer}:{lr:e}"), tcfg));
        }
    }
    out
}

/// Rounding only, clip only, both, and plain round-to-nearest.
pub fn mode_grid(base: &TuneConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = [TuneMode::Rounding, TuneMode::Clip, TuneMode::Both]
        .into_iter()
        .map(|mode| Variant::tuned(mode.to_string(), TuneConfig { mode, ..*base }))
        .collect();
    out.push(Variant::rtn(base));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub method: String,
    pub optimizer: String,
    pub mode: String,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub quant: String,
    /// Mean over blocks of the round-to-nearest reconstruction loss on the
    /// same block inputs the variant was tuned on.
    pub rtn_loss: f64,
    pub tuned_loss: f64,
    pub block_rtn_loss: Vec<f64>,
    pub block_tuned_loss: Vec<f64>,
    pub ppl_fp: f64,
    pub ppl_rtn: f64,
    pub ppl_tuned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let lw = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<lw$}  {:<9}  {:<8}  {:>9}  {:>12}  {:>12}  {:>9}  {:>9}  {:>9}\n",
            "label", "optimizer", "mode", "lr", "rtn_loss", "tuned_loss", "ppl_fp", "ppl_rtn", "ppl_tuned"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<lw$}  {:<9}  {:<8}  {:>9.2e}  {:>12.4e}  {:>12.4e}  {:>9.3}  {:>9.3}  {:>9.3}",
                r.label, r.optimizer, r.mode, r.lr, r.rtn_loss, r.tuned_loss, r.ppl_fp, r.ppl_rtn, r.ppl_tuned
            );
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Quantizes `model` once per variant and reports reconstruction loss and
/// held-out perplexity next to the full-precision and round-to-nearest
/// baselines.
pub fn compare_quantizers(
    model: &ModelWeights<f32>,
    calib: &CalibSet,
    heldout: &[usize],
    qcfg: &QuantConfig,
    variants: &[Variant],
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(arg_err("no variants to compare"));
    }
    let ppl_fp = perplexity(model, heldout)?;
    let base = TuneConfig::default();
    let rtn_model = tune_model(model, calib, qcfg, &base, Method::Rtn)?;
    let ppl_rtn = perplexity(&rtn_model.dequantized, heldout)?;

    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let tuned = tune_model(model, calib, qcfg, &v.tcfg, v.method)?;
        let block_rtn_loss: Vec<f64> = tuned.reports.iter().map(|r| r.rtn_loss).collect();
        let block_tuned_loss: Vec<f64> = tuned.reports.iter().map(|r| r.tuned_loss).collect();
        let ppl_tuned = match v.method {
            Method::Rtn => ppl_rtn,
            Method::SignRound => perplexity(&tuned.dequantized, heldout)?,
        };
        let (optimizer, mode, lr, steps) = match v.method {
            Method::Rtn => ("none".to_string(), "none".to_string(), 0.0, 0),
            Method::SignRound => (
                v.tcfg.optimizer.to_string(),
                v.tcfg.mode.to_string(),
                v.tcfg.lr0(),
                v.tcfg.steps,
            ),
        };
        rows.push(AblationRow {
            label: v.label.clone(),
            method: v.method.to_string(),
            optimizer,
            mode,
            lr,
            steps,
            seed: v.tcfg.seed,
            quant: qcfg.to_string(),
            rtn_loss: mean(&block_rtn_loss),
            tuned_loss: mean(&block_tuned_loss),
            block_rtn_loss,
            block_tuned_loss,
            ppl_fp,
            ppl_rtn,
            ppl_tuned,
        });
    }
    Ok(AblationReport { rows })
}

// ---- parameter statistics ------------------------------------------------

pub const HIST_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHistogram {
    pub block: usize,
    /// `abs_v`, `alpha`, or `beta`.
    pub param: String,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

fn histogram<'a>(values: impl Iterator<Item = f64> + 'a, lo: f64, hi: f64) -> Vec<u64> {
    let mut counts = vec![0u64; HIST_BINS];
    for v in values {
        let t = ((v - lo) / (hi - lo) * HIST_BINS as f64).floor();
        let bin = if t.is_nan() { 0 } else { t.clamp(0.0, (HIST_BINS - 1) as f64) as usize };
        counts[bin] += 1;
    }
    counts
}

/// Histograms of `|V|` over `[0, 0.5]` and of `α`, `β` over `[1e-3, 1]`,
/// pooled over all weights of each block.
pub fn param_histograms<T: Scalar>(snapshots: &[BestSnapshot<T>]) -> Result<Vec<ParamHistogram>> {
    if snapshots.is_empty() {
        return Err(arg_err("no snapshots"));
    }
    let mut out = Vec::with_capacity(3 * snapshots.len());
    for (block, snap) in snapshots.iter().enumerate() {
        let all = |f: fn(&TunedParams<T>) -> &Tensor<T>| {
            snap.params
                .iter()
                .flat_map(move |p| f(p).data().iter().map(|v| v.as_f64()))
        };
        out.push(ParamHistogram {
            block,
            param: "abs_v".into(),
            lo: 0.0,
            hi: V_BOUND,
            counts: histogram(all(|p| &p.v).map(f64::abs), 0.0, V_BOUND),
        });
        for (name, f) in [
            ("alpha", (|p| &p.alpha) as fn(&TunedParams<T>) -> &Tensor<T>),
            ("beta", |p| &p.beta),
        ] {
            out.push(ParamHistogram {
                block,
                param: name.into(),
                lo: CLIP_SCALE_MIN,
                hi: 1.0,
                counts: histogram(all(f), CLIP_SCALE_MIN, 1.0),
            });
        }
    }
    Ok(out)
}

/// CSV with columns `block,param,bin,lo,hi,count`.
pub fn emit_param_stats<T: Scalar>(snapshots: &[BestSnapshot<T>]) -> Result<String> {
    let mut s = String::from("block,param,bin,lo,hi,count\n");
    for h in param_histograms(snapshots)? {
        let width = (h.hi - h.lo) / HIST_BINS as f64;
        for (i, c) in h.counts.iter().enumerate() {
            let lo = h.lo + i as f64 * width;
            let _ = writeln!(s, "{},{},{},{:.6},{:.6},{}", h.block, h.param, i, lo, lo + width, c);
        }
    }
    Ok(s)
}

// ---- evaluation helpers --------------------------------------------------

/// Per-block output MSE of `model` against `reference`, both fed the
/// reference's hidden states for `sequences`.
pub fn per_block_mse<T: Scalar>(
    reference: &ModelWeights<T>,
    model: &ModelWeights<T>,
    sequences: &[Vec<usize>],
) -> Result<Vec<f64>> {
    if reference.n_layers() != model.n_layers() || reference.cfg.d_model != model.cfg.d_model {
        return Err(dim_err("models differ in shape"));
    }
    let mut h = reference.embed(sequences)?;
    let mut out = Vec::with_capacity(reference.n_layers());
    for (rb, mb) in reference.blocks.iter().zip(&model.blocks) {
        let want = rb.forward(&h)?;
        let got = mb.forward(&h)?;
        let sq: f64 = want
            .data()
            .iter()
            .zip(got.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        out.push(sq / want.numel().max(1) as f64);
        h = want;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_elements_enumerate_four() {
        let w = Tensor::<f64>::from_f64([1, 2], &[0.3, -0.7]).unwrap();
        let x = Tensor::from_f64([2, 3], &[1.0, 0.5, -0.2, 0.1, 0.9, 0.4]).unwrap();
        let r = brute_force_rounding(&w, &x, &QuantConfig::new(2, -1).unwrap()).unwrap();
        assert_eq!(r.candidates, 4);
        assert!(r.optimal_mse <= r.rtn_mse);
    }

    #[test]
    fn on_grid_row_is_exact() {
        // s = 0.1, zp = 8 at 4 bits: every value is a grid point.
        let vals = [-0.8, 0.7, 0.0, 0.3, -0.2, 0.5];
        let w = Tensor::<f64>::from_f64([1, 6], &vals).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([6, 5], 1.0, &mut rng);
        let r = brute_force_rounding(&w, &x, &QuantConfig::new(4, -1).unwrap()).unwrap();
        assert!(r.optimal_mse < 1e-24);
        assert_eq!(r.optimal_codes, r.rtn_codes);
        let exact = OracleResult { optimal_mse: 0.0, ..r };
        assert_eq!(exact.with_tuned(vec![], 0.0).gap_ratio, Some(1.0));
    }

    #[test]
    fn brute_force_preconditions() {
        let w = Tensor::<f64>::zeros([1, 17]);
        let x = Tensor::<f64>::zeros([17, 2]);
        assert!(brute_force_rounding(&w, &x, &QuantConfig::new(2, -1).unwrap()).is_err());
        let w = Tensor::<f64>::zeros([1, 8]);
        let x = Tensor::<f64>::zeros([8, 2]);
        assert!(brute_force_rounding(&w, &x, &QuantConfig::new(2, 4).unwrap()).is_err());
        assert!(brute_force_rounding(&w, &Tensor::zeros([7, 2]), &QuantConfig::new(2, -1).unwrap()).is_err());
    }

    #[test]
    fn optimum_matches_independent_search_small() {
        // Filter all 4⁴ code vectors down to the floor/ceil neighborhood.
        let (w, x) = sandwich_fixture(5);
        let w = Tensor::new([1, 4], w.data()[..4].to_vec()).unwrap();
        let x = Tensor::new([4, 16], x.data()[..64].to_vec()).unwrap();
        let q = QuantConfig::new(2, -1).unwrap();
        let r = brute_force_rounding(&w, &x, &q).unwrap();
        let p = compute_scale_zp(w.data(), &q, 1.0, 1.0);
        let mut best = f64::INFINITY;
        for c in 0..256u32 {
            let codes: Vec<u8> = (0..4).map(|i| (c >> (2 * i) & 3) as u8).collect();
            let near = codes.iter().zip(w.data()).all(|(&k, &wi)| {
                let v = wi / p.scale + p.zp as f64;
                let k = k as f64;
                k == v.floor().clamp(0.0, 3.0) || k == v.ceil().clamp(0.0, 3.0)
            });
            if near {
                best = best.min(row_output_mse(w.data(), x.data(), 16, &codes, p.scale, p.zp as f64));
            }
        }
        assert!((best - r.optimal_mse).abs() <= 1e-12 * best.max(1.0));
    }

    #[test]
    fn grid_parsing() {
        let base = TuneConfig::default();
        let v = Variant::parse_grid("signsgd:5e-3,adam:1e-2", &base).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1].tcfg.optimizer, OptimizerKind::Adam);
        assert_eq!(v[1].tcfg.lr, Some(1e-2));
        let v = Variant::parse_grid("rtn, signsgd:5e-3:clip", &base).unwrap();
        assert_eq!(v[0].method, Method::Rtn);
        assert_eq!(v[1].tcfg.mode, TuneMode::Clip);
        assert!(Variant::parse_grid("sgd:1e-3", &base).is_err());
        assert!(Variant::parse_grid("adam", &base).is_err());
        assert!(Variant::parse_grid("", &base).is_err());
        assert_eq!(optimizer_grid(&base).len(), 8);
        assert_eq!(mode_grid(&base).len(), 4);
    }

    #[test]
    fn histograms() {
        let layout = crate::quant::GroupLayout::new(&[4, 8], &QuantConfig::new(4, 4).unwrap()).unwrap();
        let mut p = TunedParams::<f32>::identity(&layout);
        let snap = BestSnapshot { params: vec![p.clone()], best_loss: 0.0, best_step: 0 };
        let h = param_histograms(&[snap]).unwrap();
        assert_eq!(h[0].counts[0], 32);
        assert_eq!(h[1].counts[HIST_BINS - 1], 8);
        assert_eq!(h[2].counts[HIST_BINS - 1], 8);

        p.v = Tensor::new([4, 8], (0..32).map(|i| i as f32 / 31.0 - 0.5).collect()).unwrap();
        let snap = BestSnapshot { params: vec![p], best_loss: 0.0, best_step: 0 };
        let h = param_histograms(std::slice::from_ref(&snap)).unwrap();
        assert_eq!(h[0].counts.iter().sum::<u64>(), 32);
        assert_eq!(h[0].counts[HIST_BINS - 1], 2);
        let csv = emit_param_stats(&[snap]).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * HIST_BINS);
        assert!(param_histograms::<f32>(&[]).is_err());
    }

    #[test]
    fn block_mse_against_self_is_zero() {
        let cfg = crate::model::ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq_len: 8,
            seed: 0,
        };
        let m = crate::model::model_init::<f32>(&cfg).unwrap();
        let seqs = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        assert_eq!(per_block_mse(&m, &m, &seqs).unwrap(), vec![0.0, 0.0]);
        let mut m2 = m.clone();
        m2.blocks[1].wq = m2.blocks[1].wq.map(|v| v * 1.5);
        let e = per_block_mse(&m, &m2, &seqs).unwrap();
        assert_eq!(e[0], 0.0);
        assert!(e[1] > 0.0);
    }
}
