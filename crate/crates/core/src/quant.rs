//! Group-wise asymmetric uniform weight quantization.
//!
//! Weights `W[out×in]` are split along the input dimension of each output
//! row into groups sharing a scale `s` and zero point `zp`:
//!
//! ```text
//! s  = max(s_min, (max(W)·α − min(W)·β) / (2^bits − 1))
//! zp = clip(round(−min(W)·β / s), 0, 2^bits − 1)
//! q  = clip(round(W/s + zp + V), 0, 2^bits − 1)
//! W̃  = s · (q − zp)
//! ```
//!
//! The group range always includes zero (`min ≤ 0 ≤ max`), so `zp` is a
//! valid code. Rounding is half-to-even.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, dim_err, format_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Scale floor for degenerate (all-zero) groups.
pub const S_MIN: f64 = 1e-8;
/// Lower clamp for the clip scales α, β.
pub const CLIP_SCALE_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    #[default]
    Asymmetric,
}

/// Bit width and grouping. Displays and parses as `W4G128` / `W2G-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    /// `-1` for one group per output row.
    pub group_size: i64,
    #[serde(default)]
    pub mode: QuantMode,
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: i64) -> Result<Self> {
        let cfg = Self {
            bits,
            group_size,
            mode: QuantMode::Asymmetric,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 3 | 4 | 8) {
            return Err(arg_err(format!("bits must be one of 2, 3, 4, 8; got {}", self.bits)));
        }
        if self.group_size != -1 && self.group_size < 1 {
            return Err(arg_err(format!(
                "group size must be -1 or positive; got {}",
                self.group_size
            )));
        }
        Ok(())
    }

    /// Largest code, `2^bits − 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Group width for rows of `cols` elements.
    pub fn effective_group_size(&self, cols: usize) -> usize {
        if self.group_size < 0 {
            cols.max(1)
        } else {
            self.group_size as usize
        }
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}G{}", self.bits, self.group_size)
    }
}

impl FromStr for QuantConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || arg_err(format!("expected a config like W4G128 or W2G-1, got `{s}`"));
        let rest = s.strip_prefix(['W', 'w']).ok_or_else(bad)?;
        let (bits, group) = rest.split_once(['G', 'g']).ok_or_else(bad)?;
        Self::new(bits.parse().map_err(|_| bad())?, group.parse().map_err(|_| bad())?)
    }
}

/// How a `[rows × cols]` weight is cut into groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub groups_per_row: usize,
}

/// One group: a contiguous slice of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSlice {
    pub row: usize,
    pub index: usize,
    pub start: usize,
    pub len: usize,
}

impl GroupLayout {
    pub fn new(shape: &[usize], cfg: &QuantConfig) -> Result<Self> {
        let &[rows, cols] = shape else {
            return Err(dim_err(format!("quantized weights must be 2-D, got {shape:?}")));
        };
        let group_size = cfg.effective_group_size(cols);
        Ok(Self {
            rows,
            cols,
            group_size,
            groups_per_row: cols.div_ceil(group_size),
        })
    }

    pub fn n_groups(&self) -> usize {
        self.rows * self.groups_per_row
    }

    pub fn group_shape(&self) -> [usize; 2] {
        [self.rows, self.groups_per_row]
    }

    /// Groups in row-major order; the last group of a row may be short.
    pub fn groups(&self) -> impl Iterator<Item = GroupSlice> + '_ {
        (0..self.rows).flat_map(move |row| {
            (0..self.groups_per_row).map(move |index| {
                let start = index * self.group_size;
                GroupSlice {
                    row,
                    index,
                    start,
                    len: self.group_size.min(self.cols - start),
                }
            })
        })
    }
}

/// Partitions each row of `w` along the input dimension.
pub fn group_view<T: Scalar>(w: &Tensor<T>, cfg: &QuantConfig) -> Result<Vec<GroupSlice>> {
    Ok(GroupLayout::new(w.shape(), cfg)?.groups().collect())
}

/// Scale and zero point of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams<T: Scalar> {
    pub scale: T,
    pub zp: u16,
}

/// Zero-extended `(min, max)` of a group.
pub fn group_range<T: Scalar>(group: &[T]) -> (T, T) {
    group
        .iter()
        .fold((T::zero(), T::zero()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Shared scalar arithmetic for the plain and tape paths; the op order
/// here mirrors [`qdq_tape`] exactly.
fn scale_zp_from_range<T: Scalar>(wmin: T, wmax: T, alpha: T, beta: T, max_code: T) -> (T, T) {
    let inv = T::one() / max_code;
    let smin = wmin * beta;
    let s_raw = (wmax * alpha - smin) * inv;
    let s = s_raw.max(T::from_f64_lossy(S_MIN)).min(T::infinity());
    let zp = ((smin * -T::one()) / s).round_even().max(T::zero()).min(max_code);
    (s, zp)
}

pub fn compute_scale_zp<T: Scalar>(
    group: &[T],
    cfg: &QuantConfig,
    alpha: T,
    beta: T,
) -> GroupParams<T> {
    let (lo, hi) = group_range(group);
    let max_code = T::from_u32(cfg.max_code()).unwrap();
    let (scale, zp) = scale_zp_from_range(lo, hi, alpha, beta, max_code);
    GroupParams {
        scale,
        zp: zp.to_u16().expect("zero point within code range"),
    }
}

/// Trainable rounding offsets and clip scales for one weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedParams<T: Scalar = f32> {
    /// Rounding offsets, shaped like the weight.
    pub v: Tensor<T>,
    /// Per-group max-side clip scale, `[rows × groups_per_row]`.
    pub alpha: Tensor<T>,
    /// Per-group min-side clip scale, `[rows × groups_per_row]`.
    pub beta: Tensor<T>,
}

impl<T: Scalar> TunedParams<T> {
    /// `V = 0`, `α = β = 1`: plain round-to-nearest.
    pub fn identity(layout: &GroupLayout) -> Self {
        Self {
            v: Tensor::zeros([layout.rows, layout.cols]),
            alpha: Tensor::ones(layout.group_shape()),
            beta: Tensor::ones(layout.group_shape()),
        }
    }

    pub fn check(&self, layout: &GroupLayout) -> Result<()> {
        let gs = layout.group_shape();
        if self.v.shape() != [layout.rows, layout.cols]
            || self.alpha.shape() != gs
            || self.beta.shape() != gs
        {
            return Err(dim_err(format!(
                "tuned params V {:?}, alpha {:?}, beta {:?} do not match grouping {:?} of [{}, {}]",
                self.v.shape(),
                self.alpha.shape(),
                self.beta.shape(),
                gs,
                layout.rows,
                layout.cols
            )));
        }
        Ok(())
    }
}

/// Integer codes with their group parameters and the dequantized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized<T: Scalar = f32> {
    pub cfg: QuantConfig,
    pub layout: GroupLayout,
    pub codes: Vec<u8>,
    pub params: Vec<GroupParams<T>>,
    pub dequant: Tensor<T>,
}

/// Quantizes `w` with explicit offsets and clip scales.
pub fn quantize<T: Scalar>(
    w: &Tensor<T>,
    cfg: &QuantConfig,
    tuned: &TunedParams<T>,
) -> Result<Quantized<T>> {
    cfg.validate()?;
    let layout = GroupLayout::new(w.shape(), cfg)?;
    tuned.check(&layout)?;
    let max_code = T::from_u32(cfg.max_code()).unwrap();
    let wd = w.data();
    let vd = tuned.v.data();
    let mut codes = vec![0u8; wd.len()];
    let mut out = vec![T::zero(); wd.len()];
    let mut params = Vec::with_capacity(layout.n_groups());
    for g in layout.groups() {
        let base = g.row * layout.cols + g.start;
        let slice = &wd[base..base + g.len];
        let gi = g.row * layout.groups_per_row + g.index;
        let (lo, hi) = group_range(slice);
        let (s, zp) = scale_zp_from_range(
            lo,
            hi,
            tuned.alpha.data()[gi],
            tuned.beta.data()[gi],
            max_code,
        );
        for j in 0..g.len {
            let q = (wd[base + j] / s + zp + vd[base + j])
                .round_even()
                .max(T::zero())
                .min(max_code);
            codes[base + j] = q.to_u8().expect("code within range");
            out[base + j] = (q - zp) * s;
        }
        params.push(GroupParams {
            scale: s,
            zp: zp.to_u16().expect("zero point within range"),
        });
    }
    Ok(Quantized {
        cfg: *cfg,
        layout,
        codes,
        params,
        dequant: Tensor::new(w.shape().to_vec(), out)?,
    })
}

/// Quantize–dequantize with tuned parameters.
pub fn qdq<T: Scalar>(w: &Tensor<T>, cfg: &QuantConfig, tuned: &TunedParams<T>) -> Result<Tensor<T>> {
    Ok(quantize(w, cfg, tuned)?.dequant)
}

/// Round-to-nearest: `V = 0`, `α = β = 1`.
pub fn rtn<T: Scalar>(w: &Tensor<T>, cfg: &QuantConfig) -> Result<Quantized<T>> {
    let layout = GroupLayout::new(w.shape(), cfg)?;
    quantize(w, cfg, &TunedParams::identity(&layout))
}

/// Records quantize–dequantize of the constant weight `w` on `tape`, with
/// gradients flowing to `v`, `alpha` and `beta` through the
/// straight-through rounding and clipping.
pub fn qdq_tape<T: Scalar>(
    tape: &mut Tape<T>,
    w: &Tensor<T>,
    cfg: &QuantConfig,
    v: Var,
    alpha: Var,
    beta: Var,
) -> Result<Var> {
    let layout = GroupLayout::new(w.shape(), cfg)?;
    let gs = layout.group_shape();
    if tape.shape(v) != w.shape() || tape.shape(alpha) != gs || tape.shape(beta) != gs {
        return Err(dim_err(format!(
            "qdq: V {:?}, alpha {:?}, beta {:?} do not match grouping {gs:?} of {:?}",
            tape.shape(v),
            tape.shape(alpha),
            tape.shape(beta),
            w.shape()
        )));
    }
    let max_code = T::from_u32(cfg.max_code()).unwrap();
    let (mut mins, mut maxs) = (Vec::new(), Vec::new());
    for g in layout.groups() {
        let base = g.row * layout.cols + g.start;
        let (lo, hi) = group_range(&w.data()[base..base + g.len]);
        mins.push(lo);
        maxs.push(hi);
    }
    let wmin = tape.constant(Tensor::new(gs, mins)?);
    let wmax = tape.constant(Tensor::new(gs, maxs)?);
    let wc = tape.constant(w.clone());

    let smax = tape.mul(wmax, alpha)?;
    let smin = tape.mul(wmin, beta)?;
    let range = tape.sub(smax, smin)?;
    let s_raw = tape.scale(range, T::one() / max_code)?;
    let s = tape.clip_ste(s_raw, T::from_f64_lossy(S_MIN), T::infinity())?;
    let neg_min = tape.scale(smin, -T::one())?;
    let zp_raw = tape.div(neg_min, s)?;
    let zp_round = tape.round_ste(zp_raw)?;
    let zp = tape.clip_ste(zp_round, T::zero(), max_code)?;

    let s_e = tape.expand_groups(s, layout.group_size, layout.cols)?;
    let zp_e = tape.expand_groups(zp, layout.group_size, layout.cols)?;
    let ws = tape.div(wc, s_e)?;
    let shifted = tape.add(ws, zp_e)?;
    let offset = tape.add(shifted, v)?;
    let rounded = tape.round_ste(offset)?;
    let q = tape.clip_ste(rounded, T::zero(), max_code)?;
    let centered = tape.sub(q, zp_e)?;
    tape.mul(centered, s_e)
}

/// Bit-packed codes with per-group scales and zero points.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub cfg: QuantConfig,
    pub n_groups: usize,
    /// LSB-first bit stream, `bits` per code, zero padded.
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub zps: Vec<u16>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PackedHeader {
    name: String,
    shape: Vec<usize>,
    bits: u8,
    group_size: i64,
    n_groups: usize,
}

/// Packs codes as a little-endian bit stream: code `i` occupies stream
/// bits `[i·bits, (i+1)·bits)`, stream bit `b` is bit `b % 8` of byte
/// `b / 8`. For 4 bits this is low nibble first; trailing bits are zero.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    if !matches!(bits, 2 | 3 | 4 | 8) {
        return Err(Error::Encoding(format!("unsupported bit width {bits}")));
    }
    let max = (1u16 << bits) - 1;
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        if c as u16 > max {
            return Err(Error::Encoding(format!(
                "code {c} at index {i} exceeds {bits}-bit range 0..={max}"
            )));
        }
        let mut bit = i * bits;
        let mut val = c as u16;
        let mut left = bits;
        while left > 0 {
            let (byte, off) = (bit / 8, bit % 8);
            let take = left.min(8 - off);
            out[byte] |= ((val & ((1 << take) - 1)) as u8) << off;
            val >>= take;
            bit += take;
            left -= take;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`] for `n` codes.
pub fn unpack_codes(packed: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    if !matches!(bits, 2 | 3 | 4 | 8) {
        return Err(Error::Encoding(format!("unsupported bit width {bits}")));
    }
    let bits = bits as usize;
    if packed.len() < (n * bits).div_ceil(8) {
        return Err(Error::Encoding(format!(
            "{} bytes cannot hold {n} codes of {bits} bits",
            packed.len()
        )));
    }
    Ok((0..n)
        .map(|i| {
            let mut bit = i * bits;
            let mut val = 0u16;
            let mut got = 0;
            while got < bits {
                let (byte, off) = (bit / 8, bit % 8);
                let take = (bits - got).min(8 - off);
                let chunk = (packed[byte] >> off) as u16 & ((1 << take) - 1);
                val |= chunk << got;
                got += take;
                bit += take;
            }
            val as u8
        })
        .collect())
}

impl PackedTensor {
    pub fn pack<T: Scalar>(name: impl Into<String>, q: &Quantized<T>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            shape: vec![q.layout.rows, q.layout.cols],
            cfg: q.cfg,
            n_groups: q.layout.n_groups(),
            codes: pack_codes(&q.codes, q.cfg.bits)?,
            scales: q.params.iter().map(|p| p.scale.as_f64() as f32).collect(),
            zps: q.params.iter().map(|p| p.zp).collect(),
        })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn unpack(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.codes, self.cfg.bits, self.numel())
    }

    /// `s · (q − zp)` in `f32`.
    pub fn dequantize(&self) -> Result<Tensor<f32>> {
        let layout = GroupLayout::new(&self.shape, &self.cfg)?;
        let codes = self.unpack()?;
        let mut out = vec![0f32; codes.len()];
        for g in layout.groups() {
            let gi = g.row * layout.groups_per_row + g.index;
            let (s, zp) = (self.scales[gi], self.zps[gi] as f32);
            let base = g.row * layout.cols + g.start;
            for j in base..base + g.len {
                out[j] = (codes[j] as f32 - zp) * s;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// `[u32 header length][header JSON][codes][scales f32][zps u16]`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&PackedHeader {
            name: self.name.clone(),
            shape: self.shape.clone(),
            bits: self.cfg.bits,
            group_size: self.cfg.group_size,
            n_groups: self.n_groups,
        })?;
        let mut out = Vec::with_capacity(4 + header.len() + self.codes.len() + self.n_groups * 6);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.codes);
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for z in &self.zps {
            out.extend_from_slice(&z.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |msg: String| format_err("<packed>", msg);
        if bytes.len() < 4 {
            return Err(err("missing header length".into()));
        }
        let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = bytes
            .get(4..4 + hlen)
            .ok_or_else(|| err(format!("header of {hlen} bytes is truncated")))?;
        let h: PackedHeader = serde_json::from_slice(body)
            .map_err(|e| err(format!("bad header: {e}")))?;
        let name = h.name.clone();
        let ferr = |msg: String| format_err(name.clone(), msg);
        let cfg = QuantConfig::new(h.bits, h.group_size).map_err(|e| ferr(e.to_string()))?;
        let layout = GroupLayout::new(&h.shape, &cfg).map_err(|e| ferr(e.to_string()))?;
        if layout.n_groups() != h.n_groups {
            return Err(ferr(format!(
                "header says {} groups, shape implies {}",
                h.n_groups,
                layout.n_groups()
            )));
        }
        let numel: usize = h.shape.iter().product();
        let code_len = (numel * h.bits as usize).div_ceil(8);
        let expect = 4 + hlen + code_len + h.n_groups * 6;
        if bytes.len() != expect {
            return Err(ferr(format!("expected {expect} bytes, found {}", bytes.len())));
        }
        let mut at = 4 + hlen;
        let codes = bytes[at..at + code_len].to_vec();
        at += code_len;
        let scales = bytes[at..at + 4 * h.n_groups]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 4 * h.n_groups;
        let zps = bytes[at..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let p = Self {
            name: h.name,
            shape: h.shape,
            cfg,
            n_groups: h.n_groups,
            codes,
            scales,
            zps,
        };
        p.unpack().map_err(|e| ferr(e.to_string()))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn config_parse_and_validate() {
        let c: QuantConfig = "W4G128".parse().unwrap();
        assert_eq!((c.bits, c.group_size), (4, 128));
        let c: QuantConfig = "W2G-1".parse().unwrap();
        assert_eq!(c.to_string(), "W2G-1");
        assert!("W5G8".parse::<QuantConfig>().is_err());
        assert!(QuantConfig::new(4, 0).is_err());
        assert!(QuantConfig::new(4, -2).is_err());
    }

    #[test]
    fn group_view_shapes() {
        let w = Tensor::<f32>::zeros([4, 8]);
        let g4 = group_view(&w, &QuantConfig::new(4, 4).unwrap()).unwrap();
        assert_eq!(g4.len(), 8);
        assert!(g4.iter().all(|g| g.len == 4));
        let gall = group_view(&w, &QuantConfig::new(4, -1).unwrap()).unwrap();
        assert_eq!(gall.len(), 4);
        assert!(gall.iter().all(|g| g.len == 8));

        let w = Tensor::<f32>::zeros([4, 10]);
        let g = group_view(&w, &QuantConfig::new(4, 4).unwrap()).unwrap();
        let row0: Vec<_> = g.iter().filter(|g| g.row == 0).map(|g| g.len).collect();
        assert_eq!(row0, vec![4, 4, 2]);
        assert_eq!(g.len(), 12);
    }

    #[test]
    fn scale_zp_examples() {
        let cfg = QuantConfig::new(4, -1).unwrap();
        let p = compute_scale_zp(&[-1.0f64, 0.5], &cfg, 1.0, 1.0);
        assert!((p.scale - 0.1).abs() < 1e-15);
        assert_eq!(p.zp, 10);

        let p = compute_scale_zp(&[-1.0f64, 0.5], &cfg, 0.5, 1.0);
        assert!((p.scale - 1.25 / 15.0).abs() < 1e-15);
        assert_eq!(p.zp, 12);

        let p = compute_scale_zp(&[0.0f64; 4], &cfg, 1.0, 1.0);
        assert_eq!(p.scale, S_MIN);
        assert_eq!(p.zp, 0);
    }

    #[test]
    fn qdq_examples() {
        let cfg = QuantConfig::new(4, -1).unwrap();
        let w = w64(&[1, 3], &[-1.0, -0.47, 0.5]);
        let q = rtn(&w, &cfg).unwrap();
        assert_eq!(q.codes, vec![0, 5, 15]);
        let want = [-1.0, -0.5, 0.5];
        for (a, b) in q.dequant.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        let layout = GroupLayout::new(w.shape(), &cfg).unwrap();
        let mut tuned = TunedParams::identity(&layout);
        tuned.v = w64(&[1, 3], &[0.0, 0.3, 0.0]);
        let q = quantize(&w, &cfg, &tuned).unwrap();
        assert_eq!(q.codes[1], 6);
        assert!((q.dequant.data()[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn on_grid_weights_reconstruct_exactly() {
        // s = 0.25, zp = 4 for bits 3: grid values k·0.25 for k in -4..=3
        let cfg = QuantConfig::new(3, -1).unwrap();
        let w = w64(&[1, 5], &[-1.0, -0.5, 0.0, 0.25, 0.75]);
        let q = rtn(&w, &cfg).unwrap();
        assert_eq!(q.dequant, w);
    }

    #[test]
    fn rtn_two_bit_example() {
        let cfg = QuantConfig::new(2, -1).unwrap();
        let w = w64(&[1, 3], &[0.0, 1.0, 0.4]);
        let q = rtn(&w, &cfg).unwrap();
        assert!((q.params[0].scale - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(q.params[0].zp, 0);
        assert_eq!(q.codes, vec![0, 3, 1]);
        let want = [0.0, 1.0, 1.0 / 3.0];
        for (a, b) in q.dequant.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_tensors() {
        let cfg = QuantConfig::new(4, -1).unwrap();
        let zeros = Tensor::<f32>::zeros([2, 4]);
        let q = rtn(&zeros, &cfg).unwrap();
        assert_eq!(q.dequant, zeros);
        assert!(q.codes.iter().zip(&q.params).all(|(&c, p)| c as u16 == p.zp));

        // Nonzero constants land on the top (or bottom) grid point.
        let c = Tensor::<f32>::full([2, 4], 0.3);
        let q = rtn(&c, &cfg).unwrap();
        for (a, b) in q.dequant.data().iter().zip(c.data()) {
            assert!((a - b).abs() <= 2.0 * f32::EPSILON * b.abs());
        }
    }

    #[test]
    fn tuned_shape_mismatch() {
        let cfg = QuantConfig::new(4, 4).unwrap();
        let w = Tensor::<f32>::zeros([2, 8]);
        let bad = TunedParams {
            v: Tensor::zeros([2, 8]),
            alpha: Tensor::ones([2, 3]),
            beta: Tensor::ones([2, 2]),
        };
        assert!(matches!(qdq(&w, &cfg, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn pack_format_bytes() {
        assert_eq!(pack_codes(&[3, 15], 4).unwrap(), vec![0xF3]);
        assert_eq!(pack_codes(&[1, 2, 3, 0], 2).unwrap(), vec![0x39]);
        // 3-bit: eight codes per three bytes
        assert_eq!(pack_codes(&[7; 8], 3).unwrap(), vec![0xFF; 3]);
        assert_eq!(pack_codes(&[1], 3).unwrap(), vec![0x01]);
        assert_eq!(pack_codes(&[0, 1], 3).unwrap(), vec![0x08]);
        assert!(matches!(pack_codes(&[16], 4), Err(Error::Encoding(_))));
        assert!(matches!(pack_codes(&[4], 2), Err(Error::Encoding(_))));
    }

    #[test]
    fn packed_tensor_bytes_round_trip() {
        let cfg = QuantConfig::new(3, 4).unwrap();
        let w = Tensor::<f32>::from_f64([3, 10], &(0..30).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>())
            .unwrap();
        let q = rtn(&w, &cfg).unwrap();
        let p = PackedTensor::pack("blocks.0.wq", &q).unwrap();
        assert_eq!(p.n_groups, 9);
        let bytes = p.to_bytes().unwrap();
        let back = PackedTensor::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.unpack().unwrap(), q.codes);
        assert_eq!(back.dequantize().unwrap(), q.dequant);
        assert!(PackedTensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(bits in prop::sample::select(vec![2u8, 3, 4, 8]), raw in prop::collection::vec(any::<u8>(), 0..200)) {
            let max = ((1u16 << bits) - 1) as u8;
            let codes: Vec<u8> = raw.iter().map(|c| c & max).collect();
            let packed = pack_codes(&codes, bits).unwrap();
            prop_assert_eq!(packed.len(), (codes.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
        }

        #[test]
        fn codes_in_range_and_offset_monotone(
            vals in prop::collection::vec(-3.0f64..3.0, 2..24),
            bits in prop::sample::select(vec![2u8, 3, 4, 8]),
            idx in 0usize..24,
        ) {
            let n = vals.len();
            let cfg = QuantConfig::new(bits, -1).unwrap();
            let w = Tensor::<f64>::new([1, n], vals).unwrap();
            let layout = GroupLayout::new(w.shape(), &cfg).unwrap();
            let base = quantize(&w, &cfg, &TunedParams::identity(&layout)).unwrap();
            prop_assert!(base.codes.iter().all(|&c| c as u32 <= cfg.max_code()));
            let i = idx % n;
            let mut tuned = TunedParams::identity(&layout);
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            tuned.v = Tensor::new([1, n], v).unwrap();
            let bumped = quantize(&w, &cfg, &tuned).unwrap();
            let want = (base.codes[i] as u32 + 1).min(cfg.max_code());
            prop_assert_eq!(bumped.codes[i] as u32, want);
        }

        #[test]
        fn shrinking_clip_scales_never_grows_scale(
            vals in prop::collection::vec(-3.0f64..3.0, 2..16),
            a in 0.001f64..1.0,
            b in 0.001f64..1.0,
        ) {
            let cfg = QuantConfig::new(4, -1).unwrap();
            let full = compute_scale_zp(&vals, &cfg, 1.0, 1.0).scale;
            prop_assert!(compute_scale_zp(&vals, &cfg, a, 1.0).scale <= full);
            prop_assert!(compute_scale_zp(&vals, &cfg, 1.0, b).scale <= full);
            prop_assert!(compute_scale_zp(&vals, &cfg, a, b).scale <= full);
        }
    }
}
