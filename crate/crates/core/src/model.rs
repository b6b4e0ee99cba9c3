//! A small pre-norm decoder-only transformer: the quantization target.
//!
//! `tokens → tok_emb + pos_emb → n_layers × [x + attn(ln1(x)); x + mlp(ln2(x))]
//! → ln_f → lm_head`. Attention is causal multi-head softmax attention; the
//! MLP is `w_down · gelu(w_up · h)`. Linear layers carry no bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, dim_err, format_err, Error, Result};
use crate::optim::{adam_update, AdamState, Bounds};
use crate::tensor::{Scalar, Tensor};
use crate::tensorfile::{StoredTensor, TensorFile};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Names of a block's quantizable linear weights, in canonical order.
pub const LINEAR_NAMES: [&str; 6] = ["wq", "wk", "wv", "wo", "w_up", "w_down"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(arg_err(format!("vocab_size must be ≥ 2, got {}", self.vocab_size)));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(arg_err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(arg_err("d_ff and max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T: Scalar = f32> {
    pub n_heads: usize,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    /// `[d_ff × d_model]`
    pub w_up: Tensor<T>,
    /// `[d_model × d_ff]`
    pub w_down: Tensor<T>,
}

/// Tape handles for a block's tensors.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    /// In [`LINEAR_NAMES`] order.
    pub linears: [Var; 6],
}

impl<T: Scalar> BlockWeights<T> {
    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn linear(&self, name: &str) -> Option<&Tensor<T>> {
        Some(match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w_up" => &self.w_up,
            "w_down" => &self.w_down,
            _ => return None,
        })
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        Some(match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "w_up" => &mut self.w_up,
            "w_down" => &mut self.w_down,
            _ => return None,
        })
    }

    /// The quantizable tensors, in [`LINEAR_NAMES`] order.
    pub fn linears(&self) -> [&Tensor<T>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_up, &self.w_down]
    }

    /// Records the layer-norm parameters as constants and uses the given
    /// handles for the linears.
    pub fn vars_with_linears(&self, tape: &mut Tape<T>, linears: [Var; 6]) -> BlockVars {
        BlockVars {
            ln1_gamma: tape.constant(self.ln1_gamma.clone()),
            ln1_beta: tape.constant(self.ln1_beta.clone()),
            ln2_gamma: tape.constant(self.ln2_gamma.clone()),
            ln2_beta: tape.constant(self.ln2_beta.clone()),
            linears,
        }
    }

    pub fn constants(&self, tape: &mut Tape<T>) -> BlockVars {
        let linears = self.linears().map(|w| tape.constant(w.clone()));
        self.vars_with_linears(tape, linears)
    }

    fn leaves(&self, tape: &mut Tape<T>) -> BlockVars {
        let linears = self.linears().map(|w| tape.leaf(w.clone()));
        BlockVars {
            ln1_gamma: tape.leaf(self.ln1_gamma.clone()),
            ln1_beta: tape.leaf(self.ln1_beta.clone()),
            ln2_gamma: tape.leaf(self.ln2_gamma.clone()),
            ln2_beta: tape.leaf(self.ln2_beta.clone()),
            linears,
        }
    }

    /// Applies the block to `x: [batch × seq × d_model]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.constants(&mut tape);
        let y = block_apply(&mut tape, &vars, xv, self.n_heads)?;
        Ok(tape.value(y).clone())
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 10] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Records one pre-norm block on the tape.
pub fn block_apply<T: Scalar>(
    tape: &mut Tape<T>,
    w: &BlockVars,
    x: Var,
    n_heads: usize,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let d = tape.shape(w.linears[0])[1];
    if xs.len() != 3 || xs[2] != d {
        return Err(dim_err(format!(
            "block input must be [batch, seq, {d}], got {xs:?}"
        )));
    }
    let [wq, wk, wv, wo, w_up, w_down] = w.linears;
    let eps = T::from_f64_lossy(LN_EPS);

    let h = tape.layer_norm(x, w.ln1_gamma, w.ln1_beta, eps)?;
    let q = tape.matmul_t(h, wq)?;
    let k = tape.matmul_t(h, wk)?;
    let v = tape.matmul_t(h, wv)?;
    let qh = tape.split_heads(q, n_heads)?;
    let kh = tape.split_heads(k, n_heads)?;
    let vh = tape.split_heads(v, n_heads)?;
    let scores = tape.matmul_t(qh, kh)?;
    let head_dim = d / n_heads;
    let scaled = tape.scale(scores, T::one() / T::from_usize(head_dim).unwrap().sqrt())?;
    let masked = tape.causal_mask(scaled)?;
    let probs = tape.softmax_lastdim(masked)?;
    let ctx = tape.matmul(probs, vh)?;
    let merged = tape.merge_heads(ctx, n_heads)?;
    let attn = tape.matmul_t(merged, wo)?;
    let x1 = tape.add(x, attn)?;

    let h2 = tape.layer_norm(x1, w.ln2_gamma, w.ln2_beta, eps)?;
    let up = tape.matmul_t(h2, w_up)?;
    let act = tape.gelu(up)?;
    let down = tape.matmul_t(act, w_down)?;
    tape.add(x1, down)
}

/// Full model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Scalar = f32> {
    pub cfg: ModelConfig,
    /// `[vocab × d_model]`
    pub tok_emb: Tensor<T>,
    /// `[max_seq_len × d_model]`
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub lnf_gamma: Tensor<T>,
    pub lnf_beta: Tensor<T>,
    /// `[vocab × d_model]`, untied from `tok_emb`.
    pub lm_head: Tensor<T>,
}

struct ModelVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    lnf_gamma: Var,
    lnf_beta: Var,
    lm_head: Var,
}

/// Seeded initialization: linears and embeddings `N(0, 0.02²)`, layer norms
/// `γ = 1, β = 0`.
pub fn model_init<T: Scalar>(cfg: &ModelConfig) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let tok_emb = Tensor::randn([v, d], INIT_STD, &mut rng);
    let pos_emb = Tensor::randn([cfg.max_seq_len, d], INIT_STD, &mut rng);
    let blocks = (0..cfg.n_layers)
        .map(|_| BlockWeights {
            n_heads: cfg.n_heads,
            ln1_gamma: Tensor::ones([d]),
            ln1_beta: Tensor::zeros([d]),
            wq: Tensor::randn([d, d], INIT_STD, &mut rng),
            wk: Tensor::randn([d, d], INIT_STD, &mut rng),
            wv: Tensor::randn([d, d], INIT_STD, &mut rng),
            wo: Tensor::randn([d, d], INIT_STD, &mut rng),
            ln2_gamma: Tensor::ones([d]),
            ln2_beta: Tensor::zeros([d]),
            w_up: Tensor::randn([f, d], INIT_STD, &mut rng),
            w_down: Tensor::randn([d, f], INIT_STD, &mut rng),
        })
        .collect();
    Ok(ModelWeights {
        cfg: *cfg,
        tok_emb,
        pos_emb,
        blocks,
        lnf_gamma: Tensor::ones([d]),
        lnf_beta: Tensor::zeros([d]),
        lm_head: Tensor::randn([v, d], INIT_STD, &mut rng),
    })
}

fn check_tokens(cfg: &ModelConfig, tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
    let b = tokens.len();
    let s = tokens.first().map_or(0, Vec::len);
    if b == 0 || s == 0 {
        return Err(Error::Data("empty token batch".into()));
    }
    if tokens.iter().any(|t| t.len() != s) {
        return Err(Error::Data("sequences in a batch must share one length".into()));
    }
    if s > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {s} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().flatten().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    Ok((b, s))
}

impl<T: Scalar> ModelWeights<T> {
    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    fn constants(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            tok_emb: tape.constant(self.tok_emb.clone()),
            pos_emb: tape.constant(self.pos_emb.clone()),
            blocks: self.blocks.iter().map(|b| b.constants(tape)).collect(),
            lnf_gamma: tape.constant(self.lnf_gamma.clone()),
            lnf_beta: tape.constant(self.lnf_beta.clone()),
            lm_head: tape.constant(self.lm_head.clone()),
        }
    }

    fn leaves(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            tok_emb: tape.leaf(self.tok_emb.clone()),
            pos_emb: tape.leaf(self.pos_emb.clone()),
            blocks: self.blocks.iter().map(|b| b.leaves(tape)).collect(),
            lnf_gamma: tape.leaf(self.lnf_gamma.clone()),
            lnf_beta: tape.leaf(self.lnf_beta.clone()),
            lm_head: tape.leaf(self.lm_head.clone()),
        }
    }

    fn embed_vars(&self, tape: &mut Tape<T>, vars: &ModelVars, tokens: &[Vec<usize>]) -> Result<Var> {
        let (b, s) = check_tokens(&self.cfg, tokens)?;
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        let tok = tape.gather_rows(vars.tok_emb, &flat)?;
        let tok = tape.reshape(tok, [b, s, self.cfg.d_model])?;
        let positions: Vec<usize> = (0..s).collect();
        let pos = tape.gather_rows(vars.pos_emb, &positions)?;
        tape.add(tok, pos)
    }

    fn logits_vars(&self, tape: &mut Tape<T>, vars: &ModelVars, tokens: &[Vec<usize>]) -> Result<Var> {
        let mut x = self.embed_vars(tape, vars, tokens)?;
        for bv in &vars.blocks {
            x = block_apply(tape, bv, x, self.cfg.n_heads)?;
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let h = tape.layer_norm(x, vars.lnf_gamma, vars.lnf_beta, eps)?;
        tape.matmul_t(h, vars.lm_head)
    }

    /// Token plus position embeddings, `[batch × seq × d_model]`: the input
    /// of block 0.
    pub fn embed(&self, tokens: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let tok_emb = tape.constant(self.tok_emb.clone());
        let pos_emb = tape.constant(self.pos_emb.clone());
        let (b, s) = check_tokens(&self.cfg, tokens)?;
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        let tok = tape.gather_rows(tok_emb, &flat)?;
        let tok = tape.reshape(tok, [b, s, self.cfg.d_model])?;
        let pos = tape.gather_rows(pos_emb, &(0..s).collect::<Vec<_>>())?;
        let x = tape.add(tok, pos)?;
        Ok(tape.value(x).clone())
    }

    /// Hidden states entering block `block_idx`.
    pub fn hidden_before(&self, tokens: &[Vec<usize>], block_idx: usize) -> Result<Tensor<T>> {
        if block_idx > self.blocks.len() {
            return Err(arg_err(format!(
                "block {block_idx} out of range for {} layers",
                self.blocks.len()
            )));
        }
        let mut x = self.embed(tokens)?;
        for b in &self.blocks[..block_idx] {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    /// Logits `[batch × seq × vocab]`.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let y = self.logits_vars(&mut tape, &vars, tokens)?;
        Ok(tape.value(y).clone())
    }

    /// Final norm and head applied to hidden states `[batch × seq × d]`.
    pub fn head(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(hidden.clone());
        let g = tape.constant(self.lnf_gamma.clone());
        let b = tape.constant(self.lnf_beta.clone());
        let w = tape.constant(self.lm_head.clone());
        let h = tape.layer_norm(x, g, b, T::from_f64_lossy(LN_EPS))?;
        let y = tape.matmul_t(h, w)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            cfg: self.cfg,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    n_heads: b.n_heads,
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            lnf_gamma: self.lnf_gamma.cast(),
            lnf_beta: self.lnf_beta.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Fully qualified names of quantizable weights. Embeddings and the
    /// head are never included.
    pub fn quantizable_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| LINEAR_NAMES.iter().map(move |n| format!("blocks.{i}.{n}")))
            .collect()
    }

    /// `(name, tensor)` pairs in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1.gamma"), &b.ln1_gamma));
            out.push((p("ln1.beta"), &b.ln1_beta));
            for (n, w) in LINEAR_NAMES.iter().zip(b.linears()) {
                out.push((p(n), w));
            }
            out.push((p("ln2.gamma"), &b.ln2_gamma));
            out.push((p("ln2.beta"), &b.ln2_beta));
        }
        out.push(("ln_f.gamma".into(), &self.lnf_gamma));
        out.push(("ln_f.beta".into(), &self.lnf_beta));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable access by qualified name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "tok_emb" => return Some(&mut self.tok_emb),
            "pos_emb" => return Some(&mut self.pos_emb),
            "ln_f.gamma" => return Some(&mut self.lnf_gamma),
            "ln_f.beta" => return Some(&mut self.lnf_beta),
            "lm_head" => return Some(&mut self.lm_head),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.")?;
        let (idx, field) = rest.split_once('.')?;
        let b = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "ln1.gamma" => Some(&mut b.ln1_gamma),
            "ln1.beta" => Some(&mut b.ln1_beta),
            "ln2.gamma" => Some(&mut b.ln2_gamma),
            "ln2.beta" => Some(&mut b.ln2_beta),
            f => b.linear_mut(f),
        }
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile>
    where
        StoredTensor: From<Tensor<T>>,
    {
        let mut f = TensorFile::new();
        for (name, t) in self.named_tensors() {
            f.insert(name, t.clone());
        }
        f.metadata
            .insert("model_config".into(), serde_json::to_string(&self.cfg)?);
        Ok(f)
    }

    /// Rebuilds weights from a container; every float tensor named by
    /// [`ModelWeights::named_tensors`] must be present.
    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let cfg_json = f
            .metadata
            .get("model_config")
            .ok_or_else(|| format_err("<manifest>", "missing model_config metadata"))?;
        let cfg: ModelConfig = serde_json::from_str(cfg_json)
            .map_err(|e| format_err("<manifest>", format!("bad model_config: {e}")))?;
        let mut m = model_init::<T>(&cfg)?;
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let stored = f
                .get(&name)
                .ok_or_else(|| format_err(name.clone(), "missing from file"))?;
            let t = stored
                .to_float::<T>()
                .ok_or_else(|| format_err(name.clone(), "expected a float tensor"))?;
            let slot = m.tensor_mut(&name).expect("known name");
            if t.shape() != slot.shape() {
                return Err(format_err(
                    name.clone(),
                    format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(m)
    }
}

/// `exp(−mean log p)` from per-token natural-log probabilities.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> f64 {
    let n = log_probs.len() as f64;
    (-log_probs.iter().sum::<f64>() / n).exp()
}

/// Log-probabilities of `targets` under `softmax(logits)`, rows of width
/// `vocab`.
pub fn target_log_probs<T: Scalar>(logits: &[T], vocab: usize, targets: &[usize]) -> Vec<f64> {
    logits
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            row[t].as_f64() - lse
        })
        .collect()
}

/// Perplexity of next-token prediction over a token stream. The stream is
/// cut into windows of at most `max_seq_len` that overlap by one token, so
/// every token after the first is predicted exactly once.
pub fn perplexity<T: Scalar>(model: &ModelWeights<T>, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Data(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let win = model.cfg.max_seq_len.max(2);
    let mut windows: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + win).min(tokens.len());
        windows.push(&tokens[start..end]);
        start = end - 1;
    }
    let mut log_probs = Vec::with_capacity(tokens.len() - 1);
    let mut i = 0;
    while i < windows.len() {
        // batch consecutive full-length windows together
        let len = windows[i].len();
        let mut j = i;
        while j < windows.len() && windows[j].len() == len && j - i < 16 {
            j += 1;
        }
        let batch: Vec<Vec<usize>> = windows[i..j].iter().map(|w| w.to_vec()).collect();
        let logits = model.forward(&batch)?;
        let v = model.cfg.vocab_size;
        for (b, w) in batch.iter().enumerate() {
            let rows = &logits.data()[b * len * v..(b * len + len - 1) * v];
            log_probs.extend(target_log_probs(rows, v, &w[1..]));
        }
        i = j;
    }
    Ok(perplexity_from_log_probs(&log_probs))
}

/// Next-token training settings for [`train_next_token`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Fits all weights to a token stream with Adam on mean next-token
/// cross-entropy, sampling random windows. Returns per-step losses.
pub fn train_next_token<T: Scalar>(
    model: &mut ModelWeights<T>,
    stream: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    use rand::Rng;
    let seq = cfg.seq_len.min(model.cfg.max_seq_len);
    if stream.len() < seq + 1 || seq < 2 {
        return Err(Error::Data(format!(
            "training stream of {} tokens is too short for windows of {seq}",
            stream.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = model.named_tensors().len();
    let mut states: Vec<Option<AdamState<T>>> = vec![None; n_params];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size * seq);
        for _ in 0..cfg.batch_size {
            let s = rng.gen_range(0..stream.len() - seq);
            inputs.push(stream[s..s + seq].to_vec());
            targets.extend_from_slice(&stream[s + 1..s + seq + 1]);
        }
        let mut tape = Tape::new();
        let vars = model.leaves(&mut tape);
        let logits = model.logits_vars(&mut tape, &vars, &inputs)?;
        let flat = tape.reshape(logits, [targets.len(), model.cfg.vocab_size])?;
        let loss = tape.cross_entropy(flat, &targets)?;
        let lv = tape.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::Data(format!("non-finite training loss {lv} at step {step}")));
        }
        losses.push(lv);
        let grads = tape.backward(loss)?;
        let lr = T::from_f64_lossy(cfg.lr * (1.0 - step as f64 / cfg.steps as f64));
        let mut handles = vec![vars.tok_emb, vars.pos_emb];
        for b in &vars.blocks {
            handles.extend([b.ln1_gamma, b.ln1_beta]);
            handles.extend(b.linears);
            handles.extend([b.ln2_gamma, b.ln2_beta]);
        }
        handles.extend([vars.lnf_gamma, vars.lnf_beta, vars.lm_head]);
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for ((name, handle), state) in names.iter().zip(handles).zip(states.iter_mut()) {
            let Some(g) = grads.get(handle) else { continue };
            let p = model.tensor_mut(name).expect("known name");
            let st = state.get_or_insert_with(|| AdamState::new(p.numel()));
            let mut data = p.data().to_vec();
            adam_update(&mut data, g.data(), st, lr, Bounds::unbounded());
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
    }
    Ok(losses)
}

/// Initializes a model from `cfg` and fits it to the training split of the
/// built-in language; `cfg.seed` seeds both the weights and the stream.
pub fn toy_model(cfg: &ModelConfig, train_steps: usize) -> Result<ModelWeights<f32>> {
    let mut m = model_init::<f32>(cfg)?;
    if train_steps == 0 {
        return Ok(m);
    }
    let tcfg = TrainConfig {
        steps: train_steps,
        seq_len: cfg.max_seq_len.min(TrainConfig::default().seq_len),
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let need = (tcfg.seq_len + 1) * 64;
    let stream = crate::calib::language_tokens(cfg.vocab_size, crate::calib::Split::Train, cfg.seed, need.max(1 << 16))?;
    train_next_token(&mut m, &stream, &tcfg)?;
    Ok(m)
}

impl<T: Scalar> BlockWeights<T> {
    /// All ten tensors; layer norms first, then linears, in a stable order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }
}
