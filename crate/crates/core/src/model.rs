//! Executable reference for the supported architecture:
//! patch tokenizer → affine embedding → one multi-head attention block with optional
//! residual → linear or one-hidden-layer ReLU classifier over the flattened
//! post-attention state.
//!
//! Images are stored channel-major (`index = ch * H * W + row * W + col`). Patches
//! are enumerated row-major over the patch grid; each patch is flattened
//! channel-major, then row-major within the patch.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Affine, Mat};

pub const ARCH_NAME: &str = "patch-attention";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuffixKind {
    Linear,
    Mlp1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Suffix {
    /// `logits = w · flat(H+) + b`, `w` of shape `classes x (R d)`.
    Linear { w: Mat, b: Vec<f64> },
    /// `logits = w2 · relu(w1 · flat(H+) + b1) + b2`.
    Mlp1 {
        w1: Mat,
        b1: Vec<f64>,
        w2: Mat,
        b2: Vec<f64>,
    },
}

impl Suffix {
    pub fn kind(&self) -> SuffixKind {
        match self {
            Suffix::Linear { .. } => SuffixKind::Linear,
            Suffix::Mlp1 { .. } => SuffixKind::Mlp1,
        }
    }

    /// First affine layer of the suffix: logits for `Linear`, hidden
    /// pre-activations for `Mlp1`.
    pub fn first_layer(&self) -> (&Mat, &[f64]) {
        match self {
            Suffix::Linear { w, b } => (w, b),
            Suffix::Mlp1 { w1, b1, .. } => (w1, b1),
        }
    }
}

/// Weights of one attention head. `wq`, `wk`, `wv` are `d_h x d`; `wo` is `d x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    /// Additive score term `mu[i][j]`, `R x R`.
    pub mask: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModelSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub classes: usize,
    pub residual: bool,
    /// `d x (C p p)`.
    pub embed_w: Mat,
    /// Per-token embedding bias (positional term included), `R x d`.
    pub embed_b: Mat,
    pub heads: Vec<HeadWeights>,
    /// Output projection bias `b_O`, length `d`.
    pub out_b: Vec<f64>,
    pub suffix: Suffix,
}

/// Axis-aligned input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::LengthMismatch {
                what: "input box upper bounds",
                expected: lo.len(),
                found: hi.len(),
            });
        }
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::shape(
                    format!("input_box[{i}]"),
                    format!("invalid interval [{l}, {h}]"),
                ));
            }
        }
        Ok(Self { lo, hi })
    }

    /// `[x0 - eps, x0 + eps]` clipped to `[0, 1]` per pixel.
    pub fn linf_clipped(x0: &[f64], eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
        }
        let lo = x0.iter().map(|&v| (v - eps).clamp(0.0, 1.0)).collect();
        let hi = x0.iter().map(|&v| (v + eps).clamp(0.0, 1.0)).collect();
        Self::new(lo, hi)
    }

    pub fn point(x0: &[f64]) -> Self {
        Self {
            lo: x0.to_vec(),
            hi: x0.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// Sub-box over the coordinates `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> InputBox {
        InputBox {
            lo: idx.iter().map(|&i| self.lo[i]).collect(),
            hi: idx.iter().map(|&i| self.hi[i]).collect(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| l <= v && v <= h)
    }
}

/// Intermediate values of one exact forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `R x d` token embeddings.
    pub tokens: Vec<Vec<f64>>,
    /// `[h][i][j]` pre-softmax scores.
    pub scores: Vec<Vec<Vec<f64>>>,
    /// `[h][i][j]` attention weights.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// `[h][j][r]` values.
    pub values: Vec<Vec<Vec<f64>>>,
    /// `[h][i][r]` queries and keys.
    pub queries: Vec<Vec<Vec<f64>>>,
    pub keys: Vec<Vec<Vec<f64>>>,
    /// `R x d` post-attention residual state.
    pub hplus: Vec<Vec<f64>>,
    /// Pre-activations of the suffix's first layer.
    pub preact: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let a = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = s.iter().map(|v| (v - a).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

impl AttentionModelSpec {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Check every shape constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::shape("dims", "all dimensions and the patch size must be positive"));
        }
        if self.height % p != 0 || self.width % p != 0 {
            return Err(Error::shape(
                "patch",
                format!("{}x{} image is not divisible by patch {p}", self.height, self.width),
            ));
        }
        if self.heads.is_empty() {
            return Err(Error::shape("heads", "at least one head is required"));
        }
        if self.model_dim == 0 || self.model_dim % self.heads.len() != 0 {
            return Err(Error::shape(
                "heads",
                format!("{} heads do not divide model_dim {}", self.heads.len(), self.model_dim),
            ));
        }
        if self.classes < 2 {
            return Err(Error::shape("dims.classes", "at least two classes are required"));
        }
        let (d, dh, r, pd) = (self.model_dim, self.head_dim(), self.tokens(), self.patch_dim());
        check_mat("weights.embed.w", &self.embed_w, d, pd)?;
        check_mat("weights.embed.b", &self.embed_b, r, d)?;
        for (h, hw) in self.heads.iter().enumerate() {
            check_mat(&format!("weights.wq.w[{h}]"), &hw.wq, dh, d)?;
            check_mat(&format!("weights.wk.w[{h}]"), &hw.wk, dh, d)?;
            check_mat(&format!("weights.wv.w[{h}]"), &hw.wv, dh, d)?;
            check_mat(&format!("weights.wo.w[{h}]"), &hw.wo, d, dh)?;
            check_mat(&format!("weights.mask[{h}]"), &hw.mask, r, r)?;
            check_len(&format!("weights.wq.b[{h}]"), &hw.bq, dh)?;
            check_len(&format!("weights.wk.b[{h}]"), &hw.bk, dh)?;
            check_len(&format!("weights.wv.b[{h}]"), &hw.bv, dh)?;
        }
        check_len("weights.wo.b", &self.out_b, d)?;
        match &self.suffix {
            Suffix::Linear { w, b } => {
                check_mat("weights.suffix.w", w, self.classes, r * d)?;
                check_len("weights.suffix.b", b, self.classes)?;
            }
            Suffix::Mlp1 { w1, b1, w2, b2 } => {
                if w1.rows == 0 {
                    return Err(Error::shape("weights.suffix.w1", "hidden width must be positive"));
                }
                check_mat("weights.suffix.w1", w1, w1.rows, r * d)?;
                check_len("weights.suffix.b1", b1, w1.rows)?;
                check_mat("weights.suffix.w2", w2, self.classes, w1.rows)?;
                check_len("weights.suffix.b2", b2, self.classes)?;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::LengthMismatch {
                what: "input image",
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Raw non-overlapping patches, `R x (C p p)`.
    pub fn patches(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        Ok((0..self.tokens())
            .map(|t| self.patch_pixels(t).iter().map(|&i| x[i]).collect())
            .collect())
    }

    /// Flat pixel indices of patch `t`, in patch-vector order.
    pub fn patch_pixels(&self, t: usize) -> Vec<usize> {
        let p = self.patch;
        let grid_w = self.width / p;
        let (pr, pc) = (t / grid_w, t % grid_w);
        let mut idx = Vec::with_capacity(self.patch_dim());
        for ch in 0..self.channels {
            for dr in 0..p {
                for dc in 0..p {
                    let row = pr * p + dr;
                    let col = pc * p + dc;
                    idx.push(ch * self.height * self.width + row * self.width + col);
                }
            }
        }
        idx
    }

    /// Embedded tokens `H_i = E patch_i + e_i`, `R x d`.
    pub fn patch_tokenize(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let patches = self.patches(x)?;
        Ok(patches
            .iter()
            .enumerate()
            .map(|(i, pv)| {
                let mut h = self.embed_w.matvec(pv);
                for (v, b) in h.iter_mut().zip(self.embed_b.row(i)) {
                    *v += b;
                }
                h
            })
            .collect())
    }

    /// Token `i` as an affine map of its own patch vector (see [`Self::patch_pixels`]).
    pub fn token_local_affine(&self, i: usize) -> Affine {
        Affine {
            w: self.embed_w.clone(),
            b: self.embed_b.row(i).to_vec(),
        }
    }

    /// Token `i` as an affine map of the full input vector.
    pub fn token_affine(&self, i: usize) -> Affine {
        let n = self.input_dim();
        let d = self.model_dim;
        let mut w = Mat::zeros(d, n);
        for (col, &pix) in self.patch_pixels(i).iter().enumerate() {
            for e in 0..d {
                w.set(e, pix, self.embed_w.get(e, col));
            }
        }
        Affine {
            w,
            b: self.embed_b.row(i).to_vec(),
        }
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        let tokens = self.patch_tokenize(x)?;
        let r = tokens.len();
        let d = self.model_dim;
        let scale = 1.0 / (self.head_dim() as f64).sqrt();

        let mut hplus: Vec<Vec<f64>> = (0..r)
            .map(|i| {
                let mut v = if self.residual {
                    tokens[i].clone()
                } else {
                    vec![0.0; d]
                };
                for (a, b) in v.iter_mut().zip(&self.out_b) {
                    *a += b;
                }
                v
            })
            .collect();

        let mut all_scores = Vec::with_capacity(self.heads.len());
        let mut all_attn = Vec::with_capacity(self.heads.len());
        let mut all_values = Vec::with_capacity(self.heads.len());
        let mut all_q = Vec::with_capacity(self.heads.len());
        let mut all_k = Vec::with_capacity(self.heads.len());
        for hw in &self.heads {
            let proj = |m: &Mat, b: &[f64]| -> Vec<Vec<f64>> {
                tokens
                    .iter()
                    .map(|t| {
                        let mut v = m.matvec(t);
                        for (a, c) in v.iter_mut().zip(b) {
                            *a += c;
                        }
                        v
                    })
                    .collect()
            };
            let q = proj(&hw.wq, &hw.bq);
            let k = proj(&hw.wk, &hw.bk);
            let v = proj(&hw.wv, &hw.bv);
            let scores: Vec<Vec<f64>> = (0..r)
                .map(|i| {
                    (0..r)
                        .map(|j| scale * dot(&q[i], &k[j]) + hw.mask.get(i, j))
                        .collect()
                })
                .collect();
            let attn: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
            for i in 0..r {
                let mut o = vec![0.0; v[0].len()];
                for (j, vj) in v.iter().enumerate() {
                    for (acc, &val) in o.iter_mut().zip(vj) {
                        *acc += attn[i][j] * val;
                    }
                }
                for (acc, p) in hplus[i].iter_mut().zip(hw.wo.matvec(&o)) {
                    *acc += p;
                }
            }
            all_scores.push(scores);
            all_attn.push(attn);
            all_values.push(v);
            all_q.push(q);
            all_k.push(k);
        }

        let flat = hplus.concat();
        let (w1, b1) = self.suffix.first_layer();
        let mut preact = w1.matvec(&flat);
        for (a, b) in preact.iter_mut().zip(b1) {
            *a += b;
        }
        let logits = match &self.suffix {
            Suffix::Linear { .. } => preact.clone(),
            Suffix::Mlp1 { w2, b2, .. } => {
                let hidden: Vec<f64> = preact.iter().map(|v| v.max(0.0)).collect();
                let mut l = w2.matvec(&hidden);
                for (a, b) in l.iter_mut().zip(b2) {
                    *a += b;
                }
                l
            }
        };

        Ok(ForwardTrace {
            tokens,
            scores: all_scores,
            attention: all_attn,
            values: all_values,
            queries: all_q,
            keys: all_k,
            hplus,
            preact,
            logits,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// `logit_y - logit_t`.
    pub fn margin(&self, x: &[f64], y: usize, t: usize) -> Result<f64> {
        let l = self.forward(x)?;
        Ok(l[y] - l[t])
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let l = self.forward(x)?;
        Ok(argmax(&l))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn check_mat(field: &str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.rows != rows || m.cols != cols || m.data.len() != rows * cols {
        return Err(Error::shape(
            field,
            format!("expected shape [{rows}, {cols}], found [{}, {}]", m.rows, m.cols),
        ));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::shape(field, "non-finite entry"));
    }
    Ok(())
}

fn check_len(field: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::shape(field, format!("expected length {n}, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::shape(field, "non-finite entry"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Random fixtures

/// Shape of a randomly initialized fixture model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub residual: bool,
    pub suffix: SuffixKind,
    pub hidden: usize,
}

impl Default for RandomModelConfig {
    fn default() -> Self {
        Self {
            height: 4,
            width: 4,
            channels: 1,
            patch: 2,
            model_dim: 4,
            heads: 1,
            classes: 3,
            residual: true,
            suffix: SuffixKind::Linear,
            hidden: 6,
        }
    }
}

impl AttentionModelSpec {
    /// Seeded random model. Weights are drawn in a fixed order (embedding, then per
    /// head Q, K, V, O, then the suffix) from a ChaCha8 stream seeded with `seed`;
    /// each entry is `N(0, 1) / sqrt(fan_in)` and biases are `N(0, 0.1^2)`. Masks are
    /// zero.
    pub fn random(cfg: &RandomModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let heads = cfg.heads.max(1);
        let d = cfg.model_dim;
        let dh = d / heads;
        let r = (cfg.height / cfg.patch.max(1)) * (cfg.width / cfg.patch.max(1));
        let pd = cfg.channels * cfg.patch * cfg.patch;
        let mat = |rows: usize, cols: usize, data: Vec<f64>| Mat { rows, cols, data };
        let fan = |n: usize| 1.0 / (n.max(1) as f64).sqrt();

        let embed_w = mat(d, pd, normal(d * pd, fan(pd)));
        let embed_b = mat(r, d, normal(r * d, 0.1));
        let mut hs = Vec::with_capacity(heads);
        for _ in 0..heads {
            hs.push(HeadWeights {
                wq: mat(dh, d, normal(dh * d, fan(d))),
                bq: normal(dh, 0.1),
                wk: mat(dh, d, normal(dh * d, fan(d))),
                bk: normal(dh, 0.1),
                wv: mat(dh, d, normal(dh * d, fan(d))),
                bv: normal(dh, 0.1),
                wo: mat(d, dh, normal(d * dh, fan(dh))),
                mask: Mat::zeros(r, r),
            });
        }
        let out_b = normal(d, 0.1);
        let flat = r * d;
        let suffix = match cfg.suffix {
            SuffixKind::Linear => Suffix::Linear {
                w: mat(cfg.classes, flat, normal(cfg.classes * flat, fan(flat))),
                b: normal(cfg.classes, 0.1),
            },
            SuffixKind::Mlp1 => Suffix::Mlp1 {
                w1: mat(cfg.hidden, flat, normal(cfg.hidden * flat, fan(flat))),
                b1: normal(cfg.hidden, 0.1),
                w2: mat(cfg.classes, cfg.hidden, normal(cfg.classes * cfg.hidden, fan(cfg.hidden))),
                b2: normal(cfg.classes, 0.1),
            },
        };
        let m = AttentionModelSpec {
            height: cfg.height,
            width: cfg.width,
            channels: cfg.channels,
            patch: cfg.patch,
            model_dim: d,
            classes: cfg.classes,
            residual: cfg.residual,
            embed_w,
            embed_b,
            heads: hs,
            out_b,
            suffix,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Uniform random image in `[0, 1]^n` from a seeded ChaCha8 stream.
pub fn random_image(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

// ---------------------------------------------------------------------------
// Weight file

/// Row-major tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn from_mat(m: &Mat) -> Self {
        Self {
            shape: vec![m.rows, m.cols],
            data: m.data.clone(),
        }
    }

    fn from_vec(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    fn stack(mats: &[&Mat]) -> Self {
        let first = mats[0];
        Self {
            shape: vec![mats.len(), first.rows, first.cols],
            data: mats.iter().flat_map(|m| m.data.iter().copied()).collect(),
        }
    }

    fn stack_vecs(vs: &[&Vec<f64>]) -> Self {
        Self {
            shape: vec![vs.len(), vs[0].len()],
            data: vs.iter().flat_map(|v| v.iter().copied()).collect(),
        }
    }

    fn check(&self, field: &str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(
                field,
                format!("expected shape {shape:?}, found {:?}", self.shape),
            ));
        }
        let n: usize = shape.iter().product();
        if self.data.len() != n {
            return Err(Error::shape(
                field,
                format!("shape {shape:?} needs {n} values, found {}", self.data.len()),
            ));
        }
        Ok(())
    }

    fn to_mat(&self, field: &str, rows: usize, cols: usize) -> Result<Mat> {
        self.check(field, &[rows, cols])?;
        Ok(Mat {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    fn to_vec(&self, field: &str, n: usize) -> Result<Vec<f64>> {
        self.check(field, &[n])?;
        Ok(self.data.clone())
    }

    fn unstack(&self, field: &str, n: usize, rows: usize, cols: usize) -> Result<Vec<Mat>> {
        self.check(field, &[n, rows, cols])?;
        Ok(self
            .data
            .chunks(rows * cols)
            .map(|c| Mat {
                rows,
                cols,
                data: c.to_vec(),
            })
            .collect())
    }

    fn unstack_vecs(&self, field: &str, n: usize, len: usize) -> Result<Vec<Vec<f64>>> {
        self.check(field, &[n, len])?;
        Ok(self.data.chunks(len).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub name: String,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsSection {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSection {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuffixSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w1: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub embed: AffineSection,
    pub wq: AffineSection,
    pub wk: AffineSection,
    pub wv: AffineSection,
    pub wo: AffineSection,
    /// `[heads, R, R]`; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Tensor>,
    pub suffix: SuffixSection,
}

/// On-disk JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub arch: ArchSection,
    pub dims: DimsSection,
    pub patch: usize,
    pub heads: usize,
    pub suffix_kind: SuffixKind,
    pub weights: WeightsSection,
}

fn required<'a>(t: &'a Option<Tensor>, field: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::shape(field, "missing tensor"))
}

impl ModelFile {
    pub fn from_spec(m: &AttentionModelSpec) -> Self {
        let hs = &m.heads;
        let mats = |f: fn(&HeadWeights) -> &Mat| Tensor::stack(&hs.iter().map(f).collect::<Vec<_>>());
        let vecs =
            |f: fn(&HeadWeights) -> &Vec<f64>| Tensor::stack_vecs(&hs.iter().map(f).collect::<Vec<_>>());
        let any_mask = hs.iter().any(|h| h.mask.data.iter().any(|&v| v != 0.0));
        let (suffix, hidden) = match &m.suffix {
            Suffix::Linear { w, b } => (
                SuffixSection {
                    w: Some(Tensor::from_mat(w)),
                    b: Some(Tensor::from_vec(b)),
                    w1: None,
                    b1: None,
                    w2: None,
                    b2: None,
                },
                None,
            ),
            Suffix::Mlp1 { w1, b1, w2, b2 } => (
                SuffixSection {
                    w: None,
                    b: None,
                    w1: Some(Tensor::from_mat(w1)),
                    b1: Some(Tensor::from_vec(b1)),
                    w2: Some(Tensor::from_mat(w2)),
                    b2: Some(Tensor::from_vec(b2)),
                },
                Some(w1.rows),
            ),
        };
        ModelFile {
            arch: ArchSection {
                name: ARCH_NAME.to_string(),
                residual: m.residual,
            },
            dims: DimsSection {
                height: m.height,
                width: m.width,
                channels: m.channels,
                model_dim: m.model_dim,
                classes: m.classes,
                hidden,
            },
            patch: m.patch,
            heads: hs.len(),
            suffix_kind: m.suffix.kind(),
            weights: WeightsSection {
                embed: AffineSection {
                    w: Tensor::from_mat(&m.embed_w),
                    b: Tensor::from_mat(&m.embed_b),
                },
                wq: AffineSection {
                    w: mats(|h| &h.wq),
                    b: vecs(|h| &h.bq),
                },
                wk: AffineSection {
                    w: mats(|h| &h.wk),
                    b: vecs(|h| &h.bk),
                },
                wv: AffineSection {
                    w: mats(|h| &h.wv),
                    b: vecs(|h| &h.bv),
                },
                wo: AffineSection {
                    w: mats(|h| &h.wo),
                    b: Tensor::from_vec(&m.out_b),
                },
                mask: any_mask.then(|| mats(|h| &h.mask)),
                suffix,
            },
        }
    }

    pub fn into_spec(self) -> Result<AttentionModelSpec> {
        if self.arch.name != ARCH_NAME {
            return Err(Error::shape(
                "arch.name",
                format!("unsupported architecture `{}`", self.arch.name),
            ));
        }
        let dims = &self.dims;
        let p = self.patch;
        if p == 0 || dims.height % p != 0 || dims.width % p != 0 {
            return Err(Error::shape(
                "patch",
                format!("{}x{} image is not divisible by patch {p}", dims.height, dims.width),
            ));
        }
        let nh = self.heads;
        if nh == 0 || dims.model_dim == 0 || dims.model_dim % nh != 0 {
            return Err(Error::shape(
                "heads",
                format!("{nh} heads do not divide model_dim {}", dims.model_dim),
            ));
        }
        let d = dims.model_dim;
        let dh = d / nh;
        let r = (dims.height / p) * (dims.width / p);
        let pd = dims.channels * p * p;
        let w = &self.weights;

        let wq = w.wq.w.unstack("weights.wq.w", nh, dh, d)?;
        let bq = w.wq.b.unstack_vecs("weights.wq.b", nh, dh)?;
        let wk = w.wk.w.unstack("weights.wk.w", nh, dh, d)?;
        let bk = w.wk.b.unstack_vecs("weights.wk.b", nh, dh)?;
        let wv = w.wv.w.unstack("weights.wv.w", nh, dh, d)?;
        let bv = w.wv.b.unstack_vecs("weights.wv.b", nh, dh)?;
        let wo = w.wo.w.unstack("weights.wo.w", nh, d, dh)?;
        let out_b = w.wo.b.to_vec("weights.wo.b", d)?;
        let masks = match &w.mask {
            Some(t) => t.unstack("weights.mask", nh, r, r)?,
            None => vec![Mat::zeros(r, r); nh],
        };
        let heads = (0..nh)
            .map(|h| HeadWeights {
                wq: wq[h].clone(),
                bq: bq[h].clone(),
                wk: wk[h].clone(),
                bk: bk[h].clone(),
                wv: wv[h].clone(),
                bv: bv[h].clone(),
                wo: wo[h].clone(),
                mask: masks[h].clone(),
            })
            .collect();

        let flat = r * d;
        let s = &w.suffix;
        let suffix = match self.suffix_kind {
            SuffixKind::Linear => {
                for (name, t) in [("w1", &s.w1), ("b1", &s.b1), ("w2", &s.w2), ("b2", &s.b2)] {
                    if t.is_some() {
                        return Err(Error::shape(
                            format!("weights.suffix.{name}"),
                            "not allowed for a linear suffix",
                        ));
                    }
                }
                Suffix::Linear {
                    w: required(&s.w, "weights.suffix.w")?.to_mat("weights.suffix.w", dims.classes, flat)?,
                    b: required(&s.b, "weights.suffix.b")?.to_vec("weights.suffix.b", dims.classes)?,
                }
            }
            SuffixKind::Mlp1 => {
                for (name, t) in [("w", &s.w), ("b", &s.b)] {
                    if t.is_some() {
                        return Err(Error::shape(
                            format!("weights.suffix.{name}"),
                            "not allowed for an mlp1 suffix",
                        ));
                    }
                }
                let hidden = dims
                    .hidden
                    .ok_or_else(|| Error::shape("dims.hidden", "required for an mlp1 suffix"))?;
                Suffix::Mlp1 {
                    w1: required(&s.w1, "weights.suffix.w1")?.to_mat("weights.suffix.w1", hidden, flat)?,
                    b1: required(&s.b1, "weights.suffix.b1")?.to_vec("weights.suffix.b1", hidden)?,
                    w2: required(&s.w2, "weights.suffix.w2")?
                        .to_mat("weights.suffix.w2", dims.classes, hidden)?,
                    b2: required(&s.b2, "weights.suffix.b2")?.to_vec("weights.suffix.b2", dims.classes)?,
                }
            }
        };

        let m = AttentionModelSpec {
            height: dims.height,
            width: dims.width,
            channels: dims.channels,
            patch: p,
            model_dim: d,
            classes: dims.classes,
            residual: self.arch.residual,
            embed_w: w.embed.w.to_mat("weights.embed.w", d, pd)?,
            embed_b: w.embed.b.to_mat("weights.embed.b", r, d)?,
            heads,
            out_b,
            suffix,
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn model_from_json(text: &str) -> Result<AttentionModelSpec> {
    let file: ModelFile = serde_json::from_str(text)?;
    file.into_spec()
}

pub fn model_to_json(m: &AttentionModelSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelFile::from_spec(m))?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AttentionModelSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

pub fn save_model(m: &AttentionModelSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    std::fs::write(path, model_to_json(m)?).map_err(|e| Error::io(path, e))
}
