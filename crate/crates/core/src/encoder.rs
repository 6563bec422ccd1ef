//! Desk-scale vision transformer: patch embedding, pre-norm attention/MLP blocks, a CLS
//! token, and a single token-dropping hook after a chosen block.
//!
//! Token matrices carry the patch tokens first and the CLS token as the last row.

use crate::error::{domain, shape_err, Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Block after which pruning may fire and the student reads its tokens; 0 disables both.
    pub prune_layer: usize,
    /// Only the last `trainable_last_k` blocks are updated during training.
    pub trainable_last_k: usize,
}

impl EncoderConfig {
    /// 56px images, 14px patches, width 64, 4 blocks of 4 heads.
    pub fn toy() -> Self {
        Self {
            image_side: 56,
            patch_size: 14,
            channels: 3,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            prune_layer: 1,
            trainable_last_k: 4,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side == 0 || self.channels == 0 {
            return domain("image side, patch size and channels must be positive");
        }
        if self.image_side % self.patch_size != 0 {
            return domain(format!(
                "image side {} is not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return domain("width, depth, heads and mlp ratio must be positive");
        }
        if self.width % self.heads != 0 {
            return domain(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.prune_layer >= self.depth {
            return domain(format!(
                "prune layer must lie in [0, {}), got {}",
                self.depth, self.prune_layer
            ));
        }
        if self.trainable_last_k > self.depth {
            return domain("trainable_last_k exceeds depth");
        }
        Ok(())
    }
}

/// Square image, row-major `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * channels {
            return shape_err("Image::new", side * side * channels, data.len());
        }
        Ok(Self {
            side,
            channels,
            data,
        })
    }

    pub fn zeros(side: usize, channels: usize) -> Self {
        Self {
            side,
            channels,
            data: vec![0.0; side * side * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.side + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.side + x) * self.channels + c] = v;
    }
}

/// Encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub patch: Matrix,
    pub cls: Vec<f64>,
    /// Original grid positions of the surviving patch tokens, strictly increasing.
    pub kept_indices: Vec<usize>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.patch.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patch.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.patch.cols()
    }

    pub(crate) fn from_rows(all: &Matrix, kept_indices: Vec<usize>) -> Self {
        let n = all.rows() - 1;
        Self {
            patch: all.block(0, n, 0, all.cols()),
            cls: all.row(n).to_vec(),
            kept_indices,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Matrix> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    /// Fused query/key/value projection, `d × 3d`.
    pub wqkv: T,
    pub bqkv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    pub fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1_gain: f(&format!("{prefix}.ln1_gain"), &self.ln1_gain),
            ln1_bias: f(&format!("{prefix}.ln1_bias"), &self.ln1_bias),
            wqkv: f(&format!("{prefix}.wqkv"), &self.wqkv),
            bqkv: f(&format!("{prefix}.bqkv"), &self.bqkv),
            wo: f(&format!("{prefix}.wo"), &self.wo),
            bo: f(&format!("{prefix}.bo"), &self.bo),
            ln2_gain: f(&format!("{prefix}.ln2_gain"), &self.ln2_gain),
            ln2_bias: f(&format!("{prefix}.ln2_bias"), &self.ln2_bias),
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut dyn FnMut(&str, &'s mut T)) {
        f(&format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(&format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        f(&format!("{prefix}.wqkv"), &mut self.wqkv);
        f(&format!("{prefix}.bqkv"), &mut self.bqkv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        f(&format!("{prefix}.bo"), &mut self.bo);
        f(&format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(&format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Matrix> {
    /// `p²C × d`.
    pub patch_w: T,
    pub patch_b: T,
    /// `N₀ × d`.
    pub pos: T,
    /// `1 × d`, positional information included.
    pub cls: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
}

impl<T> EncoderParams<T> {
    pub fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> EncoderParams<U> {
        EncoderParams {
            patch_w: f(&format!("{prefix}.patch_w"), &self.patch_w),
            patch_b: f(&format!("{prefix}.patch_b"), &self.patch_b),
            pos: f(&format!("{prefix}.pos"), &self.pos),
            cls: f(&format!("{prefix}.cls"), &self.cls),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{prefix}.blocks.{i}"), f))
                .collect(),
            final_gain: f(&format!("{prefix}.final_gain"), &self.final_gain),
            final_bias: f(&format!("{prefix}.final_bias"), &self.final_bias),
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut dyn FnMut(&str, &'s mut T)) {
        f(&format!("{prefix}.patch_w"), &mut self.patch_w);
        f(&format!("{prefix}.patch_b"), &mut self.patch_b);
        f(&format!("{prefix}.pos"), &mut self.pos);
        f(&format!("{prefix}.cls"), &mut self.cls);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
        f(&format!("{prefix}.final_gain"), &mut self.final_gain);
        f(&format!("{prefix}.final_bias"), &mut self.final_bias);
    }
}

const INIT_STD: f64 = 0.02;

impl EncoderParams<Matrix> {
    pub fn init(cfg: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.width;
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                wqkv: Matrix::randn(d, 3 * d, INIT_STD, rng),
                bqkv: Matrix::zeros(1, 3 * d),
                wo: Matrix::randn(d, d, INIT_STD, rng),
                bo: Matrix::zeros(1, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                w1: Matrix::randn(d, hidden, INIT_STD, rng),
                b1: Matrix::zeros(1, hidden),
                w2: Matrix::randn(hidden, d, INIT_STD, rng),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        Self {
            patch_w: Matrix::randn(cfg.patch_dim(), d, (1.0 / cfg.patch_dim() as f64).sqrt(), rng),
            patch_b: Matrix::zeros(1, d),
            pos: Matrix::randn(cfg.num_patches(), d, INIT_STD, rng),
            cls: Matrix::randn(1, d, INIT_STD, rng),
            blocks,
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> EncoderParams<Var> {
        self.map("encoder", &mut |_, m| tape.param(m))
    }
}

/// Non-overlapping `p×p` patches in raster order, each flattened as `(y, x, channel)`.
pub fn patchify(image: &Image, cfg: &EncoderConfig) -> Result<Matrix> {
    if image.side != cfg.image_side || image.channels != cfg.channels {
        return shape_err(
            "patchify",
            format!("{0}×{0}×{1} image", cfg.image_side, cfg.channels),
            format!("{0}×{0}×{1}", image.side, image.channels),
        );
    }
    cfg.validate()?;
    let (p, g, c) = (cfg.patch_size, cfg.grid_side(), cfg.channels);
    let mut out = Matrix::zeros(cfg.num_patches(), cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        row[k] = image.get(gy * p + y, gx * p + x, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch projection plus positional embeddings, with the CLS token appended.
pub fn embed_tape(tape: &mut Tape<'_>, p: &EncoderParams<Var>, patches: Var) -> Var {
    let x = tape.matmul(patches, p.patch_w);
    let x = tape.add_row(x, p.patch_b);
    let x = tape.add(x, p.pos);
    tape.concat_rows(&[x, p.cls])
}

/// `x + Attn(LN₁(x))`, then `x + MLP(LN₂(x))`. Returns the output and per-head attention.
pub fn block_tape(tape: &mut Tape<'_>, b: &BlockParams<Var>, x: Var, heads: usize) -> (Var, Vec<Var>) {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias);
    let qkv = tape.matmul(h, b.wqkv);
    let qkv = tape.add_row(qkv, b.bqkv);
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for head in 0..heads {
        let q = tape.slice_cols(qkv, head * dh, (head + 1) * dh);
        let k = tape.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
        let v = tape.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
        let kt = tape.transpose(k);
        let s = tape.matmul(q, kt);
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s);
        maps.push(a);
        outs.push(tape.matmul(a, v));
    }
    let o = tape.concat_cols(&outs);
    let o = tape.matmul(o, b.wo);
    let o = tape.add_row(o, b.bo);
    let x = tape.add(x, o);
    let h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias);
    let h = tape.matmul(h, b.w1);
    let h = tape.add_row(h, b.b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, b.w2);
    let h = tape.add_row(h, b.b2);
    (tape.add(x, h), maps)
}

/// Runs blocks `from+1 ..= to` (1-based) on `x`.
pub fn run_blocks_tape(
    tape: &mut Tape<'_>,
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    mut x: Var,
    from: usize,
    to: usize,
    attention: &mut Vec<Vec<Var>>,
) -> Result<Var> {
    for layer in from + 1..=to {
        let (y, maps) = block_tape(tape, &p.blocks[layer - 1], x, cfg.heads);
        if !tape.value(y).is_finite() {
            return Err(Error::NonFinite {
                stage: format!("encoder layer {layer}"),
            });
        }
        attention.push(maps);
        x = y;
    }
    Ok(x)
}

/// Chooses surviving patch rows from the tokens after the hook layer (CLS last); must
/// return ascending positions.
pub type Hook<'h, 'a> = &'h mut dyn FnMut(&mut Tape<'a>, Var) -> Result<Vec<usize>>;

pub struct EncoderTrace {
    /// Final tokens after the closing layer norm, CLS last.
    pub tokens: Var,
    pub kept_indices: Vec<usize>,
    /// Tokens right after block `tap_layer`, before any pruning.
    pub tap: Option<Var>,
    /// Per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

/// Full encoder pass on `tape`. If `hook` is given it fires after block `tap_layer`.
pub fn forward_tape<'a>(
    tape: &mut Tape<'a>,
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    patches: &Matrix,
    tap_layer: usize,
    hook: Option<Hook<'_, 'a>>,
) -> Result<EncoderTrace> {
    let n0 = cfg.num_patches();
    if patches.shape() != (n0, cfg.patch_dim()) {
        return shape_err(
            "encoder forward",
            format!("{n0}×{}", cfg.patch_dim()),
            format!("{}×{}", patches.rows(), patches.cols()),
        );
    }
    if tap_layer > cfg.depth {
        return domain(format!("tap layer {tap_layer} beyond depth {}", cfg.depth));
    }
    let input = tape.constant(patches.clone());
    let x = embed_tape(tape, p, input);
    let mut attention = Vec::with_capacity(cfg.depth);
    let mut kept_indices: Vec<usize> = (0..n0).collect();
    let (x, tap) = if tap_layer == 0 {
        (x, None)
    } else {
        let x = run_blocks_tape(tape, p, cfg, x, 0, tap_layer, &mut attention)?;
        match hook {
            Some(hook) => {
                let kept = hook(tape, x)?;
                if kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&k| k >= n0) {
                    return domain("hook must return strictly increasing patch positions");
                }
                let mut rows = kept.clone();
                rows.push(n0);
                let y = tape.gather_rows(x, &rows);
                kept_indices = kept;
                (y, Some(x))
            }
            None => (x, Some(x)),
        }
    };
    let x = run_blocks_tape(tape, p, cfg, x, tap_layer, cfg.depth, &mut attention)?;
    let tokens = tape.layer_norm(x, p.final_gain, p.final_bias);
    Ok(EncoderTrace {
        tokens,
        kept_indices,
        tap,
        attention,
    })
}

/// Patch embedding alone: `N₀` tokens and the CLS token, before any block.
pub fn patch_embed(image: &Image, params: &EncoderParams, cfg: &EncoderConfig) -> Result<TokenSet> {
    let patches = patchify(image, cfg)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let input = tape.constant(patches);
    let x = embed_tape(&mut tape, &p, input);
    Ok(TokenSet::from_rows(tape.value(x), (0..cfg.num_patches()).collect()))
}

/// Inference pass. `hook` sees the tokens after `cfg.prune_layer` (CLS last) and returns
/// the patch positions to keep; it is ignored when the prune layer is 0.
pub fn forward(
    image: &Image,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    hook: Option<&mut dyn FnMut(&Matrix) -> Result<Vec<usize>>>,
) -> Result<TokenSet> {
    cfg.validate()?;
    let patches = patchify(image, cfg)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let trace = match hook {
        Some(h) if cfg.prune_layer > 0 => {
            let mut wrapped = |t: &mut Tape<'_>, v: Var| h(t.value(v));
            forward_tape(&mut tape, &p, cfg, &patches, cfg.prune_layer, Some(&mut wrapped))?
        }
        _ => forward_tape(&mut tape, &p, cfg, &patches, 0, None)?,
    };
    Ok(TokenSet::from_rows(tape.value(trace.tokens), trace.kept_indices))
}

/// Analytic multiply-add count of the blocks: per block `4nd² + 2n²d + 2·r·nd²` with
/// `n = N₀+1` up to the hook layer and `n = ⌈ρN₀⌉+1` after it.
pub fn flop_count(cfg: &EncoderConfig, rho: f64) -> u64 {
    let n0 = cfg.num_patches() as u64;
    let d = cfg.width as u64;
    let r = cfg.mlp_ratio as u64;
    let per_block = |n: u64| 4 * n * d * d + 2 * n * n * d + 2 * r * n * d * d;
    let kept = if cfg.prune_layer == 0 || rho >= 1.0 {
        n0
    } else {
        crate::pruning::kept_count(rho, n0 as usize) as u64
    };
    (1..=cfg.depth as u64)
        .map(|layer| {
            if layer <= cfg.prune_layer as u64 {
                per_block(n0 + 1)
            } else {
                per_block(kept + 1)
            }
        })
        .sum()
}
