//! Patch embedding, the initial token sequence and the staged pre-norm
//! transformer encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{gelu, layer_norm, linear, matmul, softmax_rows, Matrix, LAYER_NORM_EPS};

/// Shape of the encoder and where its pruning boundaries sit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Layer counts after which a pruning boundary occurs, ascending.
    pub stage_boundaries: Vec<usize>,
}

impl Default for EncoderConfig {
    /// Desk-scale configuration: 64x64 RGB, 16 patches of 16x16, C=32,
    /// 8 layers in 4 stages.
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            channels: 3,
            patch_size: 16,
            embed_dim: 32,
            num_layers: 8,
            num_heads: 4,
            mlp_ratio: 4.0,
            stage_boundaries: vec![2, 4, 6],
        }
    }
}

impl EncoderConfig {
    /// ViT-Base shaped encoder (L=12, P=16, C=768, 12 heads) pruned after
    /// layers 3, 6 and 9.
    pub fn vit_base(image_h: usize, image_w: usize) -> Self {
        Self {
            image_h,
            image_w,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            stage_boundaries: vec![3, 6, 9],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::invalid("image and patch sizes must be positive"));
        }
        if self.image_h % p != 0 || self.image_w % p != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_h, self.image_w
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        self.mlp_hidden_checked()?;
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers must be positive"));
        }
        let s = self.num_stages();
        if self.num_layers % s != 0 {
            return Err(Error::invalid(format!(
                "{} layers cannot be split into {s} equal stages",
                self.num_layers
            )));
        }
        let k = self.layers_per_stage();
        for (i, &b) in self.stage_boundaries.iter().enumerate() {
            if b != k * (i + 1) {
                return Err(Error::invalid(format!(
                    "stage boundaries {:?} are not evenly spaced every {k} layers",
                    self.stage_boundaries
                )));
            }
        }
        Ok(())
    }

    fn mlp_hidden_checked(&self) -> Result<usize> {
        let hidden = self.mlp_ratio * self.embed_dim as f64;
        if !(hidden >= 1.0) || hidden.fract() != 0.0 {
            return Err(Error::invalid(format!(
                "mlp_ratio {} x embed_dim {} must be a positive integer",
                self.mlp_ratio, self.embed_dim
            )));
        }
        Ok(hidden as usize)
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    /// Number of patch tokens T.
    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Number of stages S.
    pub fn num_stages(&self) -> usize {
        self.stage_boundaries.len() + 1
    }

    /// Layers per stage K = L / S.
    pub fn layers_per_stage(&self) -> usize {
        self.num_layers / self.num_stages()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64) as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Zero-based layer indices that make up 1-based stage `stage`.
    pub fn stage_layers(&self, stage: usize) -> std::ops::Range<usize> {
        let k = self.layers_per_stage();
        (stage - 1) * k..stage * k
    }

    /// Width of the decoder's per-level projection: C/2, at least 8.
    pub fn decoder_dim(&self) -> usize {
        (self.embed_dim / 2).max(8)
    }
}

/// Original patch-grid positions of the active patch tokens, strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap(Vec<usize>);

impl IndexMap {
    pub fn new(positions: Vec<usize>, grid_len: usize) -> Result<Self> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("index map must be strictly increasing"));
        }
        if positions.last().is_some_and(|&p| p >= grid_len) {
            return Err(Error::invalid(format!("index map position out of range 0..{grid_len}")));
        }
        Ok(Self(positions))
    }

    /// The full grid `0..t`.
    pub fn full(t: usize) -> Self {
        Self((0..t).collect())
    }

    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.0.binary_search(&pos).is_ok()
    }

    /// Sub-map keeping the slots whose flag is set.
    pub fn filter(&self, keep: &[bool]) -> Self {
        Self(
            self.0
                .iter()
                .zip(keep)
                .filter_map(|(&p, &k)| k.then_some(p))
                .collect(),
        )
    }
}

/// Which pruned subset a prototype token summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Low,
    High,
}

/// A prototype as carried in the sequence: feature plus origin tag.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeToken {
    pub feature: Vec<f64>,
    pub origin: Origin,
}

/// The active tokens of one stage: `[cls; patches; prototypes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub cls: Vec<f64>,
    pub patches: Matrix,
    pub prototypes: Vec<PrototypeToken>,
    pub index_map: IndexMap,
}

impl TokenSequence {
    pub fn new(
        cls: Vec<f64>,
        patches: Matrix,
        prototypes: Vec<PrototypeToken>,
        index_map: IndexMap,
    ) -> Result<Self> {
        let c = patches.cols();
        if cls.len() != c && patches.rows() > 0 {
            return Err(Error::invalid("cls width differs from patch width"));
        }
        if index_map.len() != patches.rows() {
            return Err(Error::invalid(format!(
                "index map length {} != patch count {}",
                index_map.len(),
                patches.rows()
            )));
        }
        if prototypes.len() > 2 {
            return Err(Error::invalid("at most two prototype tokens"));
        }
        if prototypes.iter().any(|p| p.feature.len() != cls.len()) {
            return Err(Error::invalid("prototype width differs from cls width"));
        }
        Ok(Self {
            cls,
            patches,
            prototypes,
            index_map,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    /// Total sequence length, cls and prototypes included.
    pub fn len(&self) -> usize {
        1 + self.patches.rows() + self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn embed_dim(&self) -> usize {
        self.cls.len()
    }

    /// Stacks all tokens into one `len x C` matrix.
    pub fn to_matrix(&self) -> Matrix {
        let c = self.embed_dim();
        let mut data = Vec::with_capacity(self.len() * c);
        data.extend_from_slice(&self.cls);
        data.extend_from_slice(self.patches.data());
        for p in &self.prototypes {
            data.extend_from_slice(&p.feature);
        }
        Matrix::new(self.len(), c, data).expect("token features are finite")
    }

    /// Inverse of [`to_matrix`](Self::to_matrix) for a matrix of the same layout.
    fn replace_from_matrix(&self, x: Matrix) -> TokenSequence {
        let n = self.num_patches();
        let cls = x.row(0).to_vec();
        let idx: Vec<usize> = (1..=n).collect();
        let patches = x.select_rows(&idx);
        let prototypes = self
            .prototypes
            .iter()
            .enumerate()
            .map(|(i, p)| PrototypeToken {
                feature: x.row(1 + n + i).to_vec(),
                origin: p.origin,
            })
            .collect();
        TokenSequence {
            cls,
            patches,
            prototypes,
            index_map: self.index_map.clone(),
        }
    }
}

/// Weights of one pre-norm transformer layer. Projections are stored
/// input-major (`in x out`) so that `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl LayerWeights {
    /// Unit layer-norm gains, every projection and bias zero.
    pub fn zeros(c: usize, hidden: usize) -> Self {
        Self {
            ln1_gamma: vec![1.0; c],
            ln1_beta: vec![0.0; c],
            wq: Matrix::zeros(c, c),
            bq: vec![0.0; c],
            wk: Matrix::zeros(c, c),
            bk: vec![0.0; c],
            wv: Matrix::zeros(c, c),
            bv: vec![0.0; c],
            wo: Matrix::zeros(c, c),
            bo: vec![0.0; c],
            ln2_gamma: vec![1.0; c],
            ln2_beta: vec![0.0; c],
            w1: Matrix::zeros(c, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, c),
            b2: vec![0.0; c],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    /// `(P*P*channels) x C`
    pub patch_proj: Matrix,
    pub patch_bias: Vec<f64>,
    pub cls: Vec<f64>,
    /// `(T+1) x C`, row 0 belongs to the class token.
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let c = config.embed_dim;
        Self {
            patch_proj: Matrix::zeros(config.patch_dim(), c),
            patch_bias: vec![0.0; c],
            cls: vec![0.0; c],
            pos_embed: Matrix::zeros(config.num_patches() + 1, c),
            layers: (0..config.num_layers)
                .map(|_| LayerWeights::zeros(c, config.mlp_hidden()))
                .collect(),
        }
    }
}

/// Splits the image into non-overlapping `P x P` patches in row-major grid
/// order, flattens each as (row, col, channel) and projects it to C dims.
pub fn patch_embed(image: &Image, patch_size: usize, proj: &Matrix, bias: &[f64]) -> Result<Matrix> {
    let p = patch_size;
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} not divisible by patch size {p}",
            image.height, image.width
        )));
    }
    let patch_dim = p * p * image.channels;
    if proj.rows() != patch_dim {
        return Err(Error::invalid(format!(
            "patch projection has {} rows, patches have {patch_dim} values",
            proj.rows()
        )));
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let mut flat = Vec::with_capacity(gh * gw * patch_dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let y = gy * p + dy;
                let start = (y * image.width + gx * p) * image.channels;
                flat.extend_from_slice(&image.data[start..start + p * image.channels]);
            }
        }
    }
    let patches = Matrix::new(gh * gw, patch_dim, flat)?;
    linear(&patches, proj, bias)
}

/// `X0 = [cls; patches] + E_pos` with the full grid as index map.
pub fn assemble_input(patch_tokens: &Matrix, cls: &[f64], pos_embed: &Matrix) -> Result<TokenSequence> {
    let t = patch_tokens.rows();
    let c = patch_tokens.cols();
    if cls.len() != c || pos_embed.rows() != t + 1 || pos_embed.cols() != c {
        return Err(Error::invalid(format!(
            "assemble_input: {t} patches of width {c}, cls width {}, pos embed {}x{}",
            cls.len(),
            pos_embed.rows(),
            pos_embed.cols()
        )));
    }
    let cls_out: Vec<f64> = cls.iter().zip(pos_embed.row(0)).map(|(a, b)| a + b).collect();
    let mut patches = patch_tokens.clone();
    for r in 0..t {
        for (v, e) in patches.row_mut(r).iter_mut().zip(pos_embed.row(r + 1)) {
            *v += e;
        }
    }
    TokenSequence::new(cls_out, patches, Vec::new(), IndexMap::full(t))
}

/// Multi-head scaled dot-product self-attention on already-normalized input.
/// Returns the projected output and the per-head attention matrices.
pub fn self_attention(x: &Matrix, w: &LayerWeights, num_heads: usize) -> Result<(Matrix, Vec<Matrix>)> {
    let c = x.cols();
    if num_heads == 0 || c % num_heads != 0 {
        return Err(Error::invalid(format!("width {c} not divisible by {num_heads} heads")));
    }
    let d = c / num_heads;
    let q = linear(x, &w.wq, &w.bq)?;
    let k = linear(x, &w.wk, &w.bk)?;
    let v = linear(x, &w.wv, &w.bv)?;
    let n = x.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut concat = Matrix::zeros(n, c);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols = h * d..(h + 1) * d;
        let mut logits = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..n {
                let kj = &k.row(j)[cols.clone()];
                logits.set(i, j, scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let attn = softmax_rows(&logits);
        for i in 0..n {
            let out = &mut concat.row_mut(i)[cols.clone()];
            for j in 0..n {
                let a = attn.get(i, j);
                for (o, vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += a * vj;
                }
            }
        }
        weights.push(attn);
    }
    Ok((linear(&concat, &w.wo, &w.bo)?, weights))
}

/// One pre-norm block on a stacked token matrix:
/// `x += MHSA(LN1(x)); x += MLP(LN2(x))`.
pub fn transformer_block(x: &Matrix, w: &LayerWeights, num_heads: usize) -> Result<Matrix> {
    let h = layer_norm(x, &w.ln1_gamma, &w.ln1_beta, LAYER_NORM_EPS)?;
    let (attn, _) = self_attention(&h, w, num_heads)?;
    let mut x = x.clone();
    x.add_assign(&attn)?;

    let h = layer_norm(&x, &w.ln2_gamma, &w.ln2_beta, LAYER_NORM_EPS)?;
    let hidden = linear(&h, &w.w1, &w.b1)?.map(gelu);
    let mlp = matmul(&hidden, &w.w2).and_then(|mut m| {
        m.add_row_vector(&w.b2)?;
        Ok(m)
    })?;
    x.add_assign(&mlp)?;
    Ok(x)
}

/// Runs one layer over cls, patches and prototypes jointly. The index map
/// passes through untouched.
pub fn transformer_layer(seq: &TokenSequence, w: &LayerWeights, num_heads: usize) -> Result<TokenSequence> {
    let x = transformer_block(&seq.to_matrix(), w, num_heads)?;
    Ok(seq.replace_from_matrix(x))
}

/// Applies the K layers of 1-based stage `stage` in order.
pub fn run_stage(
    seq: &TokenSequence,
    stage: usize,
    config: &EncoderConfig,
    weights: &EncoderWeights,
) -> Result<TokenSequence> {
    if stage == 0 || stage > config.num_stages() {
        return Err(Error::invalid(format!(
            "stage {stage} outside 1..={}",
            config.num_stages()
        )));
    }
    let layers = weights
        .layers
        .get(config.stage_layers(stage))
        .ok_or_else(|| Error::invalid("encoder has fewer layers than configured"))?;
    let mut x = seq.to_matrix();
    for w in layers {
        x = transformer_block(&x, w, config.num_heads)?;
    }
    Ok(seq.replace_from_matrix(x))
}
