//! Calibration tokens, block-input capture and per-step batch sampling.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::model::{BlockWeights, ModelWeights};
use crate::tensor::{Scalar, Tensor};

/// Default number of calibration sequences.
pub const DEFAULT_NSAMPLES: usize = 128;
/// Default calibration sequence length.
pub const DEFAULT_SEQLEN: usize = 64;

/// Fixed-length calibration sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibSet {
    pub sequences: Vec<Vec<usize>>,
    pub seqlen: usize,
    pub source: String,
}

impl CalibSet {
    pub fn nsamples(&self) -> usize {
        self.sequences.len()
    }

    /// Greedily cuts the first `nsamples · seqlen` tokens of `stream`.
    pub fn from_stream(
        stream: &[usize],
        seqlen: usize,
        nsamples: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        if seqlen == 0 || nsamples == 0 {
            return Err(arg_err("seqlen and nsamples must be positive"));
        }
        let need = seqlen * nsamples;
        if stream.len() < need {
            return Err(Error::Data(format!(
                "insufficient tokens: {nsamples} samples of {seqlen} need {need}, have {}",
                stream.len()
            )));
        }
        Ok(Self {
            sequences: stream[..need].chunks(seqlen).map(<[usize]>::to_vec).collect(),
            seqlen,
            source: source.into(),
        })
    }
}

/// Parses newline-delimited decimal token ids. Blank lines are skipped.
pub fn parse_tokens(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: usize = line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("`{line}` is not a non-negative integer token id"),
        })?;
        if id >= vocab {
            return Err(Error::Data(format!(
                "token id {id} on line {} is out of range for vocab {vocab}",
                i + 1
            )));
        }
        out.push(id);
    }
    Ok(out)
}

pub fn read_token_file(path: impl AsRef<Path>, vocab: usize) -> Result<Vec<usize>> {
    parse_tokens(&fs::read_to_string(path)?, vocab)
}

pub fn write_token_file(path: impl AsRef<Path>, tokens: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(tokens.len() * 4);
    for t in tokens {
        s.push_str(&t.to_string());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_tokens(
    path: impl AsRef<Path>,
    seqlen: usize,
    nsamples: usize,
    vocab: usize,
) -> Result<CalibSet> {
    let path = path.as_ref();
    let stream = read_token_file(path, vocab)?;
    CalibSet::from_stream(&stream, seqlen, nsamples, path.display().to_string())
}

/// A first-order Markov chain over `vocab` tokens with a seeded sparse
/// transition table: each state favours a handful of successors, and a
/// small uniform floor keeps every transition possible.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    vocab: usize,
    seed: u64,
    rows: Vec<Vec<f64>>,
}

const SUCCESSORS: usize = 6;
const UNIFORM_FLOOR: f64 = 0.02;

impl MarkovSource {
    pub fn new(seed: u64, vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(arg_err(format!("vocab must be ≥ 2, got {vocab}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = SUCCESSORS.min(vocab);
        let rows = (0..vocab)
            .map(|_| {
                let mut w = vec![UNIFORM_FLOOR / vocab as f64; vocab];
                let picks = index::sample(&mut rng, vocab, k);
                let raw: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
                let total: f64 = raw.iter().sum();
                for (j, r) in picks.iter().zip(raw) {
                    w[j] += (1.0 - UNIFORM_FLOOR) * r / total;
                }
                w
            })
            .collect();
        Ok(Self { vocab, seed, rows })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// `P(next = j | current = i)`.
    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    /// `n` tokens; the stream's randomness comes from `stream_seed`.
    pub fn stream(&self, stream_seed: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        rng.set_stream(self.seed);
        let dists: Vec<WeightedIndex<f64>> = self
            .rows
            .iter()
            .map(|r| WeightedIndex::new(r).expect("positive weights"))
            .collect();
        let mut cur = rng.gen_range(0..self.vocab);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(cur);
            cur = dists[cur].sample(&mut rng);
        }
        out
    }
}

/// Seeded synthetic calibration set: the chain and the stream both derive
/// from `seed`.
pub fn synth_tokens(seed: u64, seqlen: usize, nsamples: usize, vocab: usize) -> Result<CalibSet> {
    let src = MarkovSource::new(seed, vocab)?;
    let stream = src.stream(seed, seqlen * nsamples);
    CalibSet::from_stream(&stream, seqlen, nsamples, format!("synth:{seed}"))
}

/// Chain seed of the built-in synthetic language shared by training,
/// calibration, and held-out evaluation.
pub const LANGUAGE_SEED: u64 = 0;

/// Which disjoint stream of the synthetic language to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Calib,
    Heldout,
}

impl Split {
    /// Stream seed for this split; splits never share a seed.
    pub fn stream_seed(self, seed: u64) -> u64 {
        let tag: u64 = match self {
            Split::Train => 1,
            Split::Calib => 2,
            Split::Heldout => 3,
        };
        (seed << 2) | tag
    }
}

/// The built-in language over `vocab` tokens.
pub fn language(vocab: usize) -> Result<MarkovSource> {
    MarkovSource::new(LANGUAGE_SEED, vocab)
}

/// `n` tokens of one split of the built-in language.
pub fn language_tokens(vocab: usize, split: Split, seed: u64, n: usize) -> Result<Vec<usize>> {
    Ok(language(vocab)?.stream(split.stream_seed(seed), n))
}

/// Calibration set drawn from the built-in language.
pub fn language_calib(vocab: usize, seed: u64, seqlen: usize, nsamples: usize) -> Result<CalibSet> {
    let stream = language_tokens(vocab, Split::Calib, seed, seqlen * nsamples)?;
    CalibSet::from_stream(&stream, seqlen, nsamples, format!("synth:{seed}"))
}

/// Hidden states entering one block, one `[seq × d_model]` tensor per
/// calibration sample, in calibration order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInputCache<T: Scalar = f32> {
    pub block_idx: usize,
    pub quantized_prior: bool,
    pub inputs: Vec<Tensor<T>>,
}

/// Samples per forward batch while capturing.
const CAPTURE_BATCH: usize = 16;

impl<T: Scalar> BlockInputCache<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Block-0 inputs: token plus position embeddings.
    pub fn embeddings(model: &ModelWeights<T>, calib: &CalibSet) -> Result<Self> {
        let mut inputs = Vec::with_capacity(calib.nsamples());
        for chunk in calib.sequences.chunks(CAPTURE_BATCH) {
            inputs.extend(model.embed(chunk)?.unstack());
        }
        Ok(Self {
            block_idx: 0,
            quantized_prior: false,
            inputs,
        })
    }

    /// Applies `block` to every entry, producing the next block's inputs.
    pub fn advance(&self, block: &BlockWeights<T>, quantized: bool) -> Result<Self> {
        Ok(Self {
            block_idx: self.block_idx + 1,
            quantized_prior: self.quantized_prior || quantized,
            inputs: map_batched(&self.inputs, |x| block.forward(x))?,
        })
    }

    /// Stacks the selected entries into `[batch × seq × d_model]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        Tensor::stack(&parts)
    }
}

/// Runs `f` over entries in batches of [`CAPTURE_BATCH`] and splits the
/// results back into per-sample tensors.
pub(crate) fn map_batched<T: Scalar>(
    items: &[Tensor<T>],
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CAPTURE_BATCH) {
        out.extend(f(&Tensor::stack(chunk)?)?.unstack());
    }
    Ok(out)
}

/// Captures the hidden states entering `block_idx`. With `quantized_prior`
/// the blocks before it are taken from `prior_quantized` (which must cover
/// every earlier block); otherwise from the original model.
pub fn capture_block_inputs<T: Scalar>(
    model: &ModelWeights<T>,
    calib: &CalibSet,
    block_idx: usize,
    quantized_prior: bool,
    prior_quantized: &[BlockWeights<T>],
) -> Result<BlockInputCache<T>> {
    if block_idx >= model.n_layers() {
        return Err(arg_err(format!(
            "block {block_idx} out of range for {} layers",
            model.n_layers()
        )));
    }
    if quantized_prior && prior_quantized.len() < block_idx {
        return Err(Error::State(format!(
            "quantized inputs for block {block_idx} need {block_idx} quantized prior blocks, have {}",
            prior_quantized.len()
        )));
    }
    let mut cache = BlockInputCache::embeddings(model, calib)?;
    for k in 0..block_idx {
        let block = if quantized_prior {
            &prior_quantized[k]
        } else {
            &model.blocks[k]
        };
        cache = cache.advance(block, quantized_prior)?;
    }
    Ok(cache)
}

/// Indices of the calibration samples used at `step`. Full-batch requests
/// return `0..n` in order; otherwise a seeded draw without replacement
/// that depends only on `(seed, step)`.
pub fn draw_indices(n: usize, batch_size: usize, step: usize, seed: u64) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return Err(arg_err(format!(
            "batch size {batch_size} must be in 1..={n} (calibration samples)"
        )));
    }
    if batch_size == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    Ok(index::sample(&mut rng, n, batch_size).into_vec())
}

/// A stacked batch and the indices it was drawn from.
pub fn draw_batch<T: Scalar>(
    cache: &BlockInputCache<T>,
    batch_size: usize,
    step: usize,
    seed: u64,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let idx = draw_indices(cache.len(), batch_size, step, seed)?;
    Ok((cache.gather(&idx)?, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_init, ModelConfig};

    #[test]
    fn load_tokens_chunks_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        let toks: Vec<usize> = (0..4096).map(|i| i % 200).collect();
        write_token_file(&p, &toks).unwrap();
        let c = load_tokens(&p, 512, 8, 256).unwrap();
        assert_eq!(c.nsamples(), 8);
        assert!(c.sequences.iter().all(|s| s.len() == 512));

        assert!(matches!(load_tokens(&p, 512, 8, 100), Err(Error::Data(_))));

        write_token_file(&p, &toks[..100]).unwrap();
        assert!(matches!(load_tokens(&p, 512, 1, 256), Err(Error::Data(_))));

        std::fs::write(&p, "1\n2\nthree\n").unwrap();
        assert!(matches!(load_tokens(&p, 1, 1, 256), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn synth_is_seeded() {
        let a = synth_tokens(3, 16, 4, 32).unwrap();
        assert_eq!(a, synth_tokens(3, 16, 4, 32).unwrap());
        assert_ne!(a.sequences, synth_tokens(4, 16, 4, 32).unwrap().sequences);
        assert!(a.sequences.iter().flatten().all(|&t| t < 32));
    }

    /// χ² goodness of fit of the observed transition counts against the
    /// generating table.
    #[test]
    fn synth_bigram_statistics_match_table() {
        let vocab = 8;
        let src = MarkovSource::new(11, vocab).unwrap();
        let stream = src.stream(5, 100_000);
        let mut counts = vec![vec![0usize; vocab]; vocab];
        for w in stream.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        for i in 0..vocab {
            let n: usize = counts[i].iter().sum();
            for j in 0..vocab {
                let e = n as f64 * src.prob(i, j);
                chi2 += (counts[i][j] as f64 - e).powi(2) / e;
            }
            dof += vocab - 1;
        }
        // Wilson–Hilferty upper 0.1% quantile
        let k = dof as f64;
        let z = 3.09;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} ≥ {crit} at {dof} dof");
    }

    fn tiny_model() -> ModelWeights<f64> {
        model_init(&ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 3,
            d_ff: 16,
            max_seq_len: 8,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn capture_matches_full_precision_activations() {
        let m = tiny_model();
        let calib = synth_tokens(2, 8, 5, 16).unwrap();
        let c0 = capture_block_inputs(&m, &calib, 0, true, &[]).unwrap();
        let c0f = capture_block_inputs(&m, &calib, 0, false, &[]).unwrap();
        assert_eq!(c0.inputs, c0f.inputs);
        assert_eq!(c0.gather(&[0, 1, 2, 3, 4]).unwrap(), m.embed(&calib.sequences).unwrap());

        let c2 = capture_block_inputs(&m, &calib, 2, false, &[]).unwrap();
        assert_eq!(
            c2.gather(&(0..5).collect::<Vec<_>>()).unwrap(),
            m.hidden_before(&calib.sequences, 2).unwrap()
        );
    }

    #[test]
    fn quantized_prior_changes_inputs() {
        let m = tiny_model();
        let calib = synth_tokens(2, 8, 4, 16).unwrap();
        assert!(matches!(
            capture_block_inputs(&m, &calib, 2, true, &m.blocks[..1]),
            Err(Error::State(_))
        ));
        let mut q = m.blocks[0].clone();
        let cfg = crate::quant::QuantConfig::new(2, 4).unwrap();
        q.wq = crate::quant::rtn(&q.wq, &cfg).unwrap().dequant;
        let fp = capture_block_inputs(&m, &calib, 1, false, &[]).unwrap();
        let qp = capture_block_inputs(&m, &calib, 1, true, &[q]).unwrap();
        assert_ne!(fp.inputs, qp.inputs);
    }

    #[test]
    fn batch_draws() {
        assert_eq!(draw_indices(5, 5, 9, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = draw_indices(32, 8, 3, 7).unwrap();
        assert_eq!(a, draw_indices(32, 8, 3, 7).unwrap());
        assert_ne!(a, draw_indices(32, 8, 4, 7).unwrap());
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 8);
        assert!(matches!(draw_indices(4, 5, 0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn language_splits_differ() {
        let a = language_tokens(32, Split::Train, 0, 64).unwrap();
        let b = language_tokens(32, Split::Heldout, 0, 64).unwrap();
        let c = language_tokens(32, Split::Calib, 0, 64).unwrap();
        assert_ne!(a, b);
        assert_ne!(b, c);
        assert_eq!(a, language_tokens(32, Split::Train, 0, 64).unwrap());
        let cal = language_calib(32, 0, 16, 4).unwrap();
        assert_eq!(cal.sequences.concat(), c);
    }
}
