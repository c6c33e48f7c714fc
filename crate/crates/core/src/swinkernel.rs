//! Forward-only numerical primitives of the shifted-window attention
//! mechanism: window partition/reverse, cyclic shift, windowed multi-head
//! self-attention with relative-position bias, patch merging, and the
//! mean-squared fluence loss.
//!
//! Weights are caller-supplied; there is no training here. The module
//! verifies mechanism correctness (bijective reshuffles, softmax structure,
//! shape contracts), not learned behavior.

use crate::numeric::KahanSum;
use crate::volgrid::{FluenceSet, BEAM_COUNT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SwinError {
    #[error("shape error: {0}")]
    Shape(String),
}

/// Dense (C, D, H, W) tensor, W-fastest row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: (usize, usize, usize, usize),
    values: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: (usize, usize, usize, usize), values: Vec<f64>) -> Result<Self, SwinError> {
        let (c, d, h, w) = shape;
        if c == 0 || d == 0 || h == 0 || w == 0 {
            return Err(SwinError::Shape(format!("zero dimension in {shape:?}")));
        }
        if values.len() != c * d * h * w {
            return Err(SwinError::Shape(format!(
                "values length {} != {c}x{d}x{h}x{w}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(SwinError::Shape(format!("non-finite value {v}")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        let (c, d, h, w) = shape;
        Self {
            shape,
            values: vec![0.0; c * d * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        let (_, dd, hh, ww) = self.shape;
        debug_assert!(d < dd && h < hh && w < ww);
        ((c * dd + d) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.values[self.index(c, d, h, w)]
    }

    /// Stacks the nine per-beam maps into a (9, 1, rows, cols) tensor.
    pub fn from_fluence_set(set: &FluenceSet) -> Result<Self, SwinError> {
        let first = &set.maps()[0];
        let (rows, cols) = (first.rows(), first.cols());
        let mut values = Vec::with_capacity(BEAM_COUNT * rows * cols);
        for map in set.maps() {
            if map.rows() != rows || map.cols() != cols {
                return Err(SwinError::Shape(format!(
                    "beam {} plane {}x{} differs from beam 1 plane {rows}x{cols}",
                    map.beam_index,
                    map.rows(),
                    map.cols()
                )));
            }
            values.extend_from_slice(map.values());
        }
        Tensor4::new((BEAM_COUNT, 1, rows, cols), values)
    }
}

/// Row-major dense matrix for projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, SwinError> {
        if data.len() != rows * cols {
            return Err(SwinError::Shape(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Patch-merging matrix that averages the eight corner copies of each
    /// channel: output channel c = mean over corners of input channel c.
    pub fn averaging_merge(channels: usize) -> Self {
        let mut m = Self::zeros(channels, 8 * channels);
        for c in 0..channels {
            for corner in 0..8 {
                m.data[c * 8 * channels + corner * channels + c] = 0.125;
            }
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Shifted-window attention configuration with caller-supplied weights.
#[derive(Debug, Clone)]
pub struct SwinConfig {
    pub window: (usize, usize, usize),
    pub shift: (usize, usize, usize),
    pub heads: usize,
    pub embed_dim: usize,
    /// (3*embed_dim) x embed_dim: rows 0..C produce Q, C..2C produce K,
    /// 2C..3C produce V.
    pub w_qkv: Mat,
    /// embed_dim x embed_dim output projection.
    pub w_out: Mat,
    /// Per-head relative-position bias, heads * (2wd-1)(2wh-1)(2ww-1).
    pub rel_pos_bias: Vec<f64>,
}

impl SwinConfig {
    pub fn validate(&self) -> Result<(), SwinError> {
        let (wd, wh, ww) = self.window;
        if wd == 0 || wh == 0 || ww == 0 {
            return Err(SwinError::Shape("window dims must be >= 1".into()));
        }
        let (sd, sh, sw) = self.shift;
        if sd >= wd || sh >= wh || sw >= ww {
            return Err(SwinError::Shape(format!(
                "shift {:?} must be < window {:?} per axis",
                self.shift, self.window
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(SwinError::Shape(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.w_qkv.rows != 3 * self.embed_dim || self.w_qkv.cols != self.embed_dim {
            return Err(SwinError::Shape("w_qkv must be (3*embed_dim, embed_dim)".into()));
        }
        if self.w_out.rows != self.embed_dim || self.w_out.cols != self.embed_dim {
            return Err(SwinError::Shape("w_out must be (embed_dim, embed_dim)".into()));
        }
        let table = (2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1);
        if self.rel_pos_bias.len() != self.heads * table {
            return Err(SwinError::Shape(format!(
                "bias table length {} != heads * {}",
                self.rel_pos_bias.len(),
                table
            )));
        }
        Ok(())
    }

    /// Default per-axis shift of floor(window/2).
    pub fn half_window_shift(window: (usize, usize, usize)) -> (usize, usize, usize) {
        (window.0 / 2, window.1 / 2, window.2 / 2)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.0 * self.window.1 * self.window.2
    }
}

/// Everything needed to invert a partition exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub orig_shape: (usize, usize, usize, usize),
    pub padded_spatial: (usize, usize, usize),
    pub window: (usize, usize, usize),
}

impl PadRecord {
    pub fn window_grid(&self) -> (usize, usize, usize) {
        (
            self.padded_spatial.0 / self.window.0,
            self.padded_spatial.1 / self.window.1,
            self.padded_spatial.2 / self.window.2,
        )
    }

    pub fn block_count(&self) -> usize {
        let (gd, gh, gw) = self.window_grid();
        gd * gh * gw
    }
}

/// Non-overlapping token blocks; each block is token-major
/// (`block[t * channels + c]`), tokens ordered (ld, lh, lw) within the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBlocks {
    pub blocks: Vec<Vec<f64>>,
    pub tokens_per_block: usize,
    pub channels: usize,
}

/// Splits the tensor into non-overlapping windows, zero-padding the spatial
/// dims up to window multiples. Blocks iterate the window grid (d, h, w)
/// outer-to-inner; the returned record suffices to invert exactly.
pub fn window_partition(
    t: &Tensor4,
    window: (usize, usize, usize),
) -> Result<(WindowBlocks, PadRecord), SwinError> {
    let (wd, wh, ww) = window;
    if wd == 0 || wh == 0 || ww == 0 {
        return Err(SwinError::Shape("window dims must be >= 1".into()));
    }
    let (c, d, h, w) = t.shape();
    let padded = (
        d.div_ceil(wd) * wd,
        h.div_ceil(wh) * wh,
        w.div_ceil(ww) * ww,
    );
    let record = PadRecord {
        orig_shape: t.shape(),
        padded_spatial: padded,
        window,
    };
    let (gd, gh, gw) = record.window_grid();
    let tokens = wd * wh * ww;
    let mut blocks = Vec::with_capacity(gd * gh * gw);
    for bd in 0..gd {
        for bh in 0..gh {
            for bw in 0..gw {
                let mut block = vec![0.0; tokens * c];
                for ld in 0..wd {
                    for lh in 0..wh {
                        for lw in 0..ww {
                            let (pd, ph, pw) = (bd * wd + ld, bh * wh + lh, bw * ww + lw);
                            if pd < d && ph < h && pw < w {
                                let tok = (ld * wh + lh) * ww + lw;
                                for ch in 0..c {
                                    block[tok * c + ch] = t.at(ch, pd, ph, pw);
                                }
                            }
                        }
                    }
                }
                blocks.push(block);
            }
        }
    }
    Ok((
        WindowBlocks {
            blocks,
            tokens_per_block: tokens,
            channels: c,
        },
        record,
    ))
}

/// Exact inverse of [`window_partition`]; bit-identical reconstruction.
pub fn window_reverse(blocks: &WindowBlocks, record: &PadRecord) -> Result<Tensor4, SwinError> {
    let (c, d, h, w) = record.orig_shape;
    let (wd, wh, ww) = record.window;
    if record.padded_spatial.0 % wd != 0
        || record.padded_spatial.1 % wh != 0
        || record.padded_spatial.2 % ww != 0
        || record.padded_spatial.0 < d
        || record.padded_spatial.1 < h
        || record.padded_spatial.2 < w
    {
        return Err(SwinError::Shape("inconsistent padding record".into()));
    }
    if blocks.blocks.len() != record.block_count() {
        return Err(SwinError::Shape(format!(
            "{} blocks, record expects {}",
            blocks.blocks.len(),
            record.block_count()
        )));
    }
    let tokens = wd * wh * ww;
    if blocks.tokens_per_block != tokens || blocks.channels != c {
        return Err(SwinError::Shape("block layout does not match record".into()));
    }
    let (gd, gh, gw) = record.window_grid();
    let mut out = Tensor4::zeros(record.orig_shape);
    let mut bi = 0;
    for bd in 0..gd {
        for bh in 0..gh {
            for bw in 0..gw {
                let block = &blocks.blocks[bi];
                if block.len() != tokens * c {
                    return Err(SwinError::Shape(format!(
                        "block {bi} has {} values, expected {}",
                        block.len(),
                        tokens * c
                    )));
                }
                bi += 1;
                for ld in 0..wd {
                    for lh in 0..wh {
                        for lw in 0..ww {
                            let (pd, ph, pw) = (bd * wd + ld, bh * wh + lh, bw * ww + lw);
                            if pd < d && ph < h && pw < w {
                                let tok = (ld * wh + lh) * ww + lw;
                                for ch in 0..c {
                                    let idx = out.index(ch, pd, ph, pw);
                                    out.values[idx] = block[tok * c + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Toroidal roll of the spatial axes by (sd, sh, sw); element (d, h, w)
/// moves to ((d+sd) mod D, ...). Negative shifts invert exactly.
pub fn cyclic_shift(t: &Tensor4, shift: (i64, i64, i64)) -> Tensor4 {
    let (c, d, h, w) = t.shape();
    let mut out = Tensor4::zeros(t.shape());
    let (sd, sh, sw) = shift;
    for ch in 0..c {
        for zd in 0..d {
            let td = (zd as i64 + sd).rem_euclid(d as i64) as usize;
            for zh in 0..h {
                let th = (zh as i64 + sh).rem_euclid(h as i64) as usize;
                for zw in 0..w {
                    let tw = (zw as i64 + sw).rem_euclid(w as i64) as usize;
                    let idx = out.index(ch, td, th, tw);
                    out.values[idx] = t.at(ch, zd, zh, zw);
                }
            }
        }
    }
    out
}

/// Per-block pairwise attention mask: `true` marks a (query, key) pair that
/// must not attend (it receives -inf before the softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub per_block: Vec<Vec<bool>>,
    pub tokens: usize,
}

/// Builds the cross-window mask for shifted-window attention: after a cyclic
/// shift, positions that came from different spatial regions (or from
/// padding) must not attend to each other. Depends only on geometry.
pub fn shift_attention_mask(record: &PadRecord, shift: (usize, usize, usize)) -> AttentionMask {
    let (_, d, h, w) = record.orig_shape;
    let (pd, ph, pw) = record.padded_spatial;
    let (wd, wh, ww) = record.window;

    // Region id per padded position on the shifted lattice. A +s roll parks
    // the wrapped content at positions [0, s), all inside the first window
    // along that axis, so the region split points are s and the window size.
    // Positions whose pre-shift source is padding get a sentinel region.
    let seg = |size: usize, pad: usize, win: usize, s: usize, i: usize| -> usize {
        let src = (i + pad - s) % pad;
        if src >= size {
            return 3; // padding region
        }
        if s == 0 || win >= pad {
            return 0; // no roll, or a single window spans the axis
        }
        if i < s {
            2 // wrapped content
        } else if i < win {
            1 // first-window remainder
        } else {
            0
        }
    };

    let (sd, sh, sw) = shift;
    let (gd, gh, gw) = record.window_grid();
    let tokens = wd * wh * ww;
    let mut per_block = Vec::with_capacity(record.block_count());
    for bd in 0..gd {
        for bh in 0..gh {
            for bw in 0..gw {
                let mut ids = Vec::with_capacity(tokens);
                for ld in 0..wd {
                    for lh in 0..wh {
                        for lw in 0..ww {
                            let id_d = seg(d, pd, wd, sd, bd * wd + ld);
                            let id_h = seg(h, ph, wh, sh, bh * wh + lh);
                            let id_w = seg(w, pw, ww, sw, bw * ww + lw);
                            ids.push((id_d * 4 + id_h) * 4 + id_w);
                        }
                    }
                }
                let mut mask = vec![false; tokens * tokens];
                for i in 0..tokens {
                    for j in 0..tokens {
                        mask[i * tokens + j] = ids[i] != ids[j];
                    }
                }
                per_block.push(mask);
            }
        }
    }
    AttentionMask { per_block, tokens }
}

/// Relative-position bias table index for a token pair within a window.
#[inline]
fn rel_index(window: (usize, usize, usize), ti: usize, tj: usize) -> usize {
    let (wd, wh, ww) = window;
    let coords = |t: usize| {
        let lw = t % ww;
        let lh = (t / ww) % wh;
        let ld = t / (wh * ww);
        (ld as isize, lh as isize, lw as isize)
    };
    let (di, hi, wi) = coords(ti);
    let (dj, hj, wj) = coords(tj);
    let rd = (di - dj + wd as isize - 1) as usize;
    let rh = (hi - hj + wh as isize - 1) as usize;
    let rw = (wi - wj + ww as isize - 1) as usize;
    (rd * (2 * wh - 1) + rh) * (2 * ww - 1) + rw
}

struct ProjectedBlock {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn project_qkv(block: &[f64], tokens: usize, cfg: &SwinConfig) -> ProjectedBlock {
    let c = cfg.embed_dim;
    let mut q = vec![0.0; tokens * c];
    let mut k = vec![0.0; tokens * c];
    let mut v = vec![0.0; tokens * c];
    for t in 0..tokens {
        let x = &block[t * c..(t + 1) * c];
        for r in 0..c {
            let (mut aq, mut ak, mut av) = (0.0, 0.0, 0.0);
            for (j, &xj) in x.iter().enumerate() {
                aq += cfg.w_qkv.at(r, j) * xj;
                ak += cfg.w_qkv.at(c + r, j) * xj;
                av += cfg.w_qkv.at(2 * c + r, j) * xj;
            }
            q[t * c + r] = aq;
            k[t * c + r] = ak;
            v[t * c + r] = av;
        }
    }
    ProjectedBlock { q, k, v }
}

/// Softmax attention rows for one block: `heads` matrices of tokens x tokens.
/// Exposed so tests and demos can inspect the normalized weights directly.
pub fn attention_weights(
    block: &[f64],
    cfg: &SwinConfig,
    mask: Option<&[bool]>,
) -> Result<Vec<Vec<f64>>, SwinError> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let tokens = block.len() / c;
    if block.len() != tokens * c || tokens != cfg.tokens_per_window() {
        return Err(SwinError::Shape(format!(
            "block length {} does not match window {:?} x embed_dim {c}",
            block.len(),
            cfg.window
        )));
    }
    if let Some(m) = mask {
        if m.len() != tokens * tokens {
            return Err(SwinError::Shape("mask size != tokens^2".into()));
        }
    }
    let proj = project_qkv(block, tokens, cfg);
    let head_dim = c / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let table = cfg.rel_pos_bias.len() / cfg.heads;

    let mut per_head = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let off = hd * head_dim;
        let bias = &cfg.rel_pos_bias[hd * table..(hd + 1) * table];
        let mut rows = vec![0.0; tokens * tokens];
        for i in 0..tokens {
            let mut logits = vec![f64::NEG_INFINITY; tokens];
            let mut max = f64::NEG_INFINITY;
            for (j, logit) in logits.iter_mut().enumerate() {
                if mask.is_some_and(|m| m[i * tokens + j]) {
                    continue;
                }
                let mut dot = 0.0;
                for r in 0..head_dim {
                    dot += proj.q[i * c + off + r] * proj.k[j * c + off + r];
                }
                let l = dot * scale + bias[rel_index(cfg.window, i, j)];
                *logit = l;
                max = max.max(l);
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row: weights stay zero
            }
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = if *l == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*l - max).exp()
                };
                denom += *l;
            }
            for (j, &e) in logits.iter().enumerate() {
                rows[i * tokens + j] = e / denom;
            }
        }
        per_head.push(rows);
    }
    Ok(per_head)
}

/// Windowed multi-head self-attention over each block:
/// `softmax(Q K^T / sqrt(head_dim) + bias + mask) V`, heads concatenated and
/// re-projected through `w_out`. Masked pairs receive -inf before softmax.
pub fn windowed_attention(
    blocks: &WindowBlocks,
    cfg: &SwinConfig,
    mask: Option<&AttentionMask>,
) -> Result<WindowBlocks, SwinError> {
    cfg.validate()?;
    if blocks.channels != cfg.embed_dim {
        return Err(SwinError::Shape(format!(
            "token feature dim {} != embed_dim {}",
            blocks.channels, cfg.embed_dim
        )));
    }
    if blocks.tokens_per_block != cfg.tokens_per_window() {
        return Err(SwinError::Shape(format!(
            "tokens per block {} != window volume {}",
            blocks.tokens_per_block,
            cfg.tokens_per_window()
        )));
    }
    if let Some(m) = mask {
        if m.per_block.len() != blocks.blocks.len() || m.tokens != blocks.tokens_per_block {
            return Err(SwinError::Shape("attention mask does not match blocks".into()));
        }
    }
    let c = cfg.embed_dim;
    let tokens = blocks.tokens_per_block;
    let head_dim = c / cfg.heads;

    let mut out_blocks = Vec::with_capacity(blocks.blocks.len());
    for (bi, block) in blocks.blocks.iter().enumerate() {
        let block_mask = mask.map(|m| m.per_block[bi].as_slice());
        let weights = attention_weights(block, cfg, block_mask)?;
        let proj = project_qkv(block, tokens, cfg);

        // concat over heads: context[t][off + r] = sum_j A[t][j] * V[j][off + r]
        let mut context = vec![0.0; tokens * c];
        for (hd, rows) in weights.iter().enumerate() {
            let off = hd * head_dim;
            for i in 0..tokens {
                for r in 0..head_dim {
                    let mut acc = 0.0;
                    for j in 0..tokens {
                        acc += rows[i * tokens + j] * proj.v[j * c + off + r];
                    }
                    context[i * c + off + r] = acc;
                }
            }
        }
        let mut out = vec![0.0; tokens * c];
        for i in 0..tokens {
            for r in 0..c {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += cfg.w_out.at(r, j) * context[i * c + j];
                }
                out[i * c + r] = acc;
            }
        }
        out_blocks.push(out);
    }
    Ok(WindowBlocks {
        blocks: out_blocks,
        tokens_per_block: tokens,
        channels: c,
    })
}

/// 2x spatial downsampling: each 2x2x2 neighborhood is concatenated into a
/// 8*C gather vector (corner-major, channel-minor, corners ordered
/// (0,0,0),(0,0,1),(0,1,0),...,(1,1,1)) and multiplied by `reduction`
/// (C' x 8C). Odd spatial dims are zero-padded first.
pub fn patch_merging(t: &Tensor4, reduction: &Mat) -> Result<Tensor4, SwinError> {
    let (c, d, h, w) = t.shape();
    if reduction.cols != 8 * c {
        return Err(SwinError::Shape(format!(
            "reduction has {} columns, expected 8*C = {}",
            reduction.cols,
            8 * c
        )));
    }
    if reduction.rows == 0 {
        return Err(SwinError::Shape("reduction must have >= 1 row".into()));
    }
    let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
    let co = reduction.rows;
    let mut out = Tensor4::zeros((co, od, oh, ow));
    let mut gather = vec![0.0; 8 * c];
    for zd in 0..od {
        for zh in 0..oh {
            for zw in 0..ow {
                gather.iter_mut().for_each(|g| *g = 0.0);
                for (corner, g) in gather.chunks_mut(c).enumerate() {
                    let (ld, lh, lw) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
                    let (pd, ph, pw) = (2 * zd + ld, 2 * zh + lh, 2 * zw + lw);
                    if pd < d && ph < h && pw < w {
                        for (ch, gv) in g.iter_mut().enumerate() {
                            *gv = t.at(ch, pd, ph, pw);
                        }
                    }
                }
                for r in 0..co {
                    let mut acc = 0.0;
                    for (k, &gv) in gather.iter().enumerate() {
                        acc += reduction.at(r, k) * gv;
                    }
                    let idx = out.index(r, zd, zh, zw);
                    out.values[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Mean squared error over all nine beam channels and voxels:
/// `loss = sum_b sum_x (pred - truth)^2 / (B * |Omega|)` with B = 9.
pub fn mse_fluence_loss(pred: &Tensor4, truth: &Tensor4) -> Result<f64, SwinError> {
    if pred.shape() != truth.shape() {
        return Err(SwinError::Shape(format!(
            "shape mismatch {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.shape().0 != BEAM_COUNT {
        return Err(SwinError::Shape(format!(
            "expected {BEAM_COUNT} beam channels, got {}",
            pred.shape().0
        )));
    }
    let mut acc = KahanSum::new();
    for (p, t) in pred.values().iter().zip(truth.values()) {
        let diff = p - t;
        acc.add(diff * diff);
    }
    Ok(acc.value() / pred.values().len() as f64)
}
