//! Image-prompt matching: multi-head cross-attention from prompt tokens to
//! image patches, a scalar similarity head, and GradCAM patch relevance.
//!
//! For each head `h`,
//!
//! ```text
//! C(h) = softmax_rows(X · W_T(h) · W_V(h)ᵀ · Yᵀ / sqrt(D_t))
//! z    = 1/(H·M) Σ_h Σ_i (C(h) · Y)_i
//! sim  = sigmoid(u · z + b)
//! ```
//!
//! GradCAM treats each `C(h)` as a free leaf variable. The gradient of `sim`
//! with respect to `C_ij(h)` is `sigmoid'(u·z + b) · (u · Y_j) / (H·M)`, and
//!
//! ```text
//! cor(j) = 1/H Σ_i Σ_h max(0, ∂sim/∂C_ij(h)) · C_ij(h)
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::numeric::{dot, matmul, sigmoid, softmax_rows, Matrix, SeededRng, Vector};
use crate::TokenId;

/// Parameters of one cross-attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// Query-side projection, `D_t x D_t`.
    pub w_t: Matrix,
    /// Key-side projection, `D_v x D_t`.
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingModel {
    token_embeddings: Matrix,
    heads: Vec<AttentionHead>,
    readout: Vec<f64>,
    bias: f64,
    /// `W_T(h) · W_V(h)ᵀ / sqrt(D_t)` per head, cached at construction.
    bilinear: Vec<Matrix>,
}

impl MatchingModel {
    pub fn new(token_embeddings: Matrix, heads: Vec<AttentionHead>, readout: Vec<f64>, bias: f64) -> Result<Self> {
        if heads.is_empty() {
            return contract("matching model needs at least one head");
        }
        let d_t = token_embeddings.cols();
        let d_v = readout.len();
        for (h, head) in heads.iter().enumerate() {
            if head.w_t.rows() != d_t || head.w_t.cols() != d_t {
                return contract(format!("head {h}: W_T is {}x{}, expected {d_t}x{d_t}", head.w_t.rows(), head.w_t.cols()));
            }
            if head.w_v.rows() != d_v || head.w_v.cols() != d_t {
                return contract(format!("head {h}: W_V is {}x{}, expected {d_v}x{d_t}", head.w_v.rows(), head.w_v.cols()));
            }
        }
        if !bias.is_finite() || readout.iter().any(|v| !v.is_finite()) {
            return contract("readout parameters must be finite");
        }
        let scale = 1.0 / (d_t as f64).sqrt();
        let bilinear = heads.iter().map(|h| matmul(&h.w_t, &h.w_v.transpose()).map(|m| m.scale(scale))).collect::<Result<Vec<_>>>()?;
        Ok(Self { token_embeddings, heads, readout, bias, bilinear })
    }

    /// Model with uniform random parameters, used for gradient checks.
    pub fn random(seed: u64, head_count: usize, vocab: usize, d_t: usize, d_v: usize) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let mut mat =
            |rows: usize, cols: usize, amp: f64| Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.uniform(-amp, amp)).collect());
        let emb = mat(vocab, d_t, 1.0)?;
        let heads = (0..head_count)
            .map(|_| Ok(AttentionHead { w_t: mat(d_t, d_t, 1.0)?, w_v: mat(d_v, d_t, 1.0)? }))
            .collect::<Result<Vec<_>>>()?;
        let readout = mat(1, d_v, 1.0)?.data().to_vec();
        let bias = mat(1, 1, 0.5)?.data()[0];
        Self::new(emb, heads, readout, bias)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn text_dim(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn image_dim(&self) -> usize {
        self.readout.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub fn token_embeddings(&self) -> &Matrix {
        &self.token_embeddings
    }

    pub fn readout(&self) -> &[f64] {
        &self.readout
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn with_readout(mut self, readout: Vec<f64>, bias: f64) -> Result<Self> {
        if readout.len() != self.image_dim() {
            return contract("readout length must stay D_v");
        }
        self.readout = readout;
        self.bias = bias;
        Ok(self)
    }

    /// Number of cross-attention layers GradCAM can be applied to. The model
    /// has a single layer, so the only valid selector is 0.
    pub fn layer_count(&self) -> usize {
        1
    }

    pub fn embed_prompt(&self, prompt: &[TokenId]) -> Result<Matrix> {
        if prompt.is_empty() {
            return input("prompt must contain at least one token");
        }
        let d_t = self.text_dim();
        let mut data = Vec::with_capacity(prompt.len() * d_t);
        for &tok in prompt {
            if tok >= self.vocab_size() {
                return input(format!("token id {tok} outside prompt vocabulary of {}", self.vocab_size()));
            }
            data.extend_from_slice(self.token_embeddings.row(tok));
        }
        Matrix::new(prompt.len(), d_t, data)
    }

    pub fn cross_attention(&self, x: &Matrix, y: &Matrix) -> Result<CrossAttention> {
        if x.cols() != self.text_dim() {
            return contract(format!("X has {} columns, expected D_t = {}", x.cols(), self.text_dim()));
        }
        self.check_features(y)?;
        let yt = y.transpose();
        let heads = self
            .bilinear
            .iter()
            .map(|b| {
                let scores = matmul(&matmul(x, b)?, &yt)?;
                Ok(softmax_rows(&scores))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossAttention { heads })
    }

    fn check_features(&self, y: &Matrix) -> Result<()> {
        if y.cols() != self.image_dim() {
            return contract(format!("Y has {} columns, expected D_v = {}", y.cols(), self.image_dim()));
        }
        if y.rows() == 0 {
            return contract("Y must have at least one patch");
        }
        Ok(())
    }

    fn check_attention(&self, heads: &[Matrix], y: &Matrix) -> Result<()> {
        self.check_features(y)?;
        if heads.len() != self.head_count() {
            return contract(format!("{} attention maps for {} heads", heads.len(), self.head_count()));
        }
        let m = heads[0].rows();
        if m == 0 {
            return contract("attention must have at least one prompt row");
        }
        if heads.iter().any(|c| c.rows() != m || c.cols() != y.rows()) {
            return contract("attention maps must all be M x K with K = patches of Y");
        }
        Ok(())
    }

    /// Pre-activation `u · z + b` and pooled `z` as a function of raw
    /// attention maps (not required to be row-stochastic).
    fn pooled(&self, heads: &[Matrix], y: &Matrix) -> Result<(f64, Vec<f64>)> {
        self.check_attention(heads, y)?;
        let m = heads[0].rows();
        let norm = 1.0 / (heads.len() * m) as f64;
        let mut z = vec![0.0; self.image_dim()];
        for c in heads {
            let attended = matmul(c, y)?;
            for i in 0..m {
                z.iter_mut().zip(attended.row(i)).for_each(|(zk, a)| *zk += a * norm);
            }
        }
        Ok((dot(&self.readout, &z) + self.bias, z))
    }

    /// The similarity forward pass viewed as a function of the attention maps.
    pub fn similarity_from_attention(&self, heads: &[Matrix], y: &Matrix) -> Result<f64> {
        Ok(sigmoid(self.pooled(heads, y)?.0))
    }

    pub fn similarity(&self, attention: &CrossAttention, y: &Matrix) -> Result<SimilarityResult> {
        let (pre, z) = self.pooled(&attention.heads, y)?;
        Ok(SimilarityResult { sim: sigmoid(pre), pooled: Vector(z), attention: attention.clone() })
    }

    /// Analytic `∂sim/∂C(h)` for every head, with `C` treated as a leaf.
    pub fn similarity_gradient(&self, heads: &[Matrix], y: &Matrix) -> Result<Vec<Matrix>> {
        let (pre, _) = self.pooled(heads, y)?;
        let s = sigmoid(pre);
        let slope = s * (1.0 - s);
        let m = heads[0].rows();
        let norm = 1.0 / (heads.len() * m) as f64;
        let per_patch: Vec<f64> = (0..y.rows()).map(|j| slope * dot(&self.readout, y.row(j)) * norm).collect();
        let grad = Matrix::new(m, y.rows(), (0..m).flat_map(|_| per_patch.iter().copied()).collect())?;
        Ok(vec![grad; heads.len()])
    }

    pub fn gradcam_correlation(&self, attention: &CrossAttention, y: &Matrix) -> Result<CorrelationMap> {
        let grads = self.similarity_gradient(&attention.heads, y)?;
        let k = y.rows();
        let mut scores = vec![0.0; k];
        for (c, g) in attention.heads.iter().zip(&grads) {
            for i in 0..c.rows() {
                for (j, s) in scores.iter_mut().enumerate() {
                    *s += g.get(i, j).max(0.0) * c.get(i, j);
                }
            }
        }
        let h = attention.heads.len() as f64;
        scores.iter_mut().for_each(|s| *s /= h);
        Ok(CorrelationMap { scores })
    }

    /// Full matching pass: embed, attend, score, attribute.
    pub fn match_prompt(&self, prompt: &[TokenId], y: &Matrix) -> Result<(SimilarityResult, CorrelationMap)> {
        self.match_prompt_at_layer(0, prompt, y)
    }

    pub fn match_prompt_at_layer(&self, layer: usize, prompt: &[TokenId], y: &Matrix) -> Result<(SimilarityResult, CorrelationMap)> {
        if layer >= self.layer_count() {
            return contract(format!("layer {layer} out of range (model has {})", self.layer_count()));
        }
        let x = self.embed_prompt(prompt)?;
        let attention = self.cross_attention(&x, y)?;
        let sim = self.similarity(&attention, y)?;
        let cor = self.gradcam_correlation(&attention, y)?;
        Ok((sim, cor))
    }

    /// Text serialization: header `H D_t D_v`, then the token embedding
    /// table, `W_T(h)` and `W_V(h)` for each head in order, the readout as a
    /// `1 x D_v` matrix and the bias as a `1 x 1` matrix.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {}", self.head_count(), self.text_dim(), self.image_dim())?;
        self.token_embeddings.write_text(&mut w)?;
        for head in &self.heads {
            head.w_t.write_text(&mut w)?;
            head.w_v.write_text(&mut w)?;
        }
        Matrix::new(1, self.image_dim(), self.readout.clone())?.write_text(&mut w)?;
        Matrix::new(1, 1, vec![self.bias])?.write_text(&mut w)?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.ok_or_else(|| crate::AglaError::Input("empty model file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| crate::AglaError::Input(format!("bad model header {header:?}: {e}")))?;
        let [h, d_t, d_v] = dims[..] else {
            return input("model header must be `H D_t D_v`");
        };
        let emb = Matrix::read_text(&mut lines)?;
        let mut heads = Vec::with_capacity(h);
        for _ in 0..h {
            let w_t = Matrix::read_text(&mut lines)?;
            let w_v = Matrix::read_text(&mut lines)?;
            heads.push(AttentionHead { w_t, w_v });
        }
        let readout = Matrix::read_text(&mut lines)?;
        let bias = Matrix::read_text(&mut lines)?;
        if emb.cols() != d_t || readout.cols() != d_v || readout.rows() != 1 || bias.data().len() != 1 {
            return input("model matrices disagree with header");
        }
        Self::new(emb, heads, readout.data().to_vec(), bias.data()[0])
    }
}

/// Per-head attention maps, each `M x K` and row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    heads: Vec<Matrix>,
}

impl CrossAttention {
    pub fn heads(&self) -> &[Matrix] {
        &self.heads
    }

    pub fn prompt_len(&self) -> usize {
        self.heads[0].rows()
    }

    pub fn patch_count(&self) -> usize {
        self.heads[0].cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityResult {
    pub sim: f64,
    pub pooled: Vector,
    pub attention: CrossAttention,
}

/// Nonnegative relevance score per image patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    pub scores: Vec<f64>,
}

impl CorrelationMap {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return contract("correlation scores must be finite and nonnegative");
        }
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Heatmap as ASCII PGM (P2), one pixel per patch, min-max scaled to
    /// 0..=255. A constant map is written as all zeros.
    pub fn to_pgm(&self, grid_width: usize, grid_height: usize) -> Result<String> {
        if grid_width * grid_height != self.scores.len() {
            return contract(format!("{} scores do not fill a {grid_width}x{grid_height} patch grid", self.scores.len()));
        }
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let grays: Vec<u8> = self.scores.iter().map(|s| if hi > lo { ((s - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 }).collect();
        Ok(crate::masking::encode_pgm(grid_width, grid_height, &grays))
    }

    /// One score per line, 17 significant digits.
    pub fn to_text(&self) -> String {
        self.scores.iter().map(|s| format!("{s:.16e}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(d: usize, vocab: Matrix) -> MatchingModel {
        MatchingModel::new(vocab, vec![AttentionHead { w_t: Matrix::identity(d), w_v: Matrix::identity(d) }], vec![0.0; d], 0.0).unwrap()
    }

    #[test]
    fn embed_prompt_is_table_lookup() {
        let model = MatchingModel::random(3, 2, 6, 4, 5).unwrap();
        let x = model.embed_prompt(&[2]).unwrap();
        assert_eq!(x.row(0), model.token_embeddings().row(2));
        let x = model.embed_prompt(&[4, 1, 4]).unwrap();
        assert_eq!(x.row(0), model.token_embeddings().row(4));
        assert_eq!(x.row(1), model.token_embeddings().row(1));
        assert_eq!(x.row(0), x.row(2));
        assert!(matches!(model.embed_prompt(&[6]), Err(crate::AglaError::Input(_))));
        assert!(model.embed_prompt(&[]).is_err());
    }

    #[test]
    fn hand_evaluated_attention() {
        let model = identity_model(2, Matrix::identity(2));
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = Matrix::identity(2);
        let c = model.cross_attention(&x, &y).unwrap();
        // softmax([1/sqrt2, 0])
        let a = (0.5f64.sqrt()).exp();
        let want0 = a / (a + 1.0);
        assert!((c.heads()[0].get(0, 0) - want0).abs() < 1e-15);
        assert!((c.heads()[0].get(0, 0) - 0.6698).abs() < 1e-4);
        assert!((c.heads()[0].get(0, 1) - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn identical_patches_give_uniform_attention() {
        let model = MatchingModel::random(9, 3, 5, 4, 3).unwrap();
        let y = Matrix::from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]).unwrap();
        let x = model.embed_prompt(&[0, 1, 2]).unwrap();
        let c = model.cross_attention(&x, &y).unwrap();
        for head in c.heads() {
            for v in head.data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let model = MatchingModel::random(1, 2, 4, 3, 5).unwrap();
        let x = model.embed_prompt(&[1]).unwrap();
        let bad_y = Matrix::zeros(3, 4);
        assert!(matches!(model.cross_attention(&x, &bad_y), Err(crate::AglaError::Contract(_))));
    }

    #[test]
    fn zero_readout_gives_sigmoid_of_bias() {
        let model = MatchingModel::random(4, 2, 4, 3, 3).unwrap().with_readout(vec![0.0; 3], 0.7).unwrap();
        let y = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        let (sim, cor) = model.match_prompt(&[0, 3], &y).unwrap();
        assert_eq!(sim.sim, sigmoid(0.7));
        assert!(cor.scores.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn one_hot_attention_selects_patch() {
        let model = identity_model(2, Matrix::identity(2)).with_readout(vec![0.5, -2.0], 0.1).unwrap();
        let y = Matrix::from_rows(&[vec![1.0, 0.25], vec![3.0, 3.0]]).unwrap();
        let c = vec![Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()];
        let sim = model.similarity_from_attention(&c, &y).unwrap();
        assert!((sim - sigmoid(0.5 * 1.0 - 2.0 * 0.25 + 0.1)).abs() < 1e-15);
        let lo = model.with_readout(vec![0.5, -2.0], 0.1).unwrap();
        let hi = lo.clone().with_readout(vec![0.5, -2.0], 0.2).unwrap();
        assert!(hi.similarity_from_attention(&c, &y).unwrap() > lo.similarity_from_attention(&c, &y).unwrap());
    }

    #[test]
    fn single_head_single_token_closed_form() {
        let model = MatchingModel::random(21, 1, 3, 4, 4).unwrap();
        let mut rng = SeededRng::new(77);
        let y = Matrix::new(5, 4, (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let x = model.embed_prompt(&[1]).unwrap();
        let att = model.cross_attention(&x, &y).unwrap();
        let cor = model.gradcam_correlation(&att, &y).unwrap();
        let c = &att.heads()[0];
        let mut z = vec![0.0; 4];
        for j in 0..5 {
            for k in 0..4 {
                z[k] += c.get(0, j) * y.get(j, k);
            }
        }
        let s = sigmoid(dot(model.readout(), &z) + model.bias());
        for j in 0..5 {
            let g = s * (1.0 - s) * dot(model.readout(), y.row(j));
            let want = g.max(0.0) * c.get(0, j);
            assert!((cor.scores[j] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn match_is_composition() {
        let model = MatchingModel::random(5, 2, 7, 4, 6).unwrap();
        let mut rng = SeededRng::new(6);
        let y = Matrix::new(9, 6, (0..54).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let prompt = [3, 1, 6];
        let (sim, cor) = model.match_prompt(&prompt, &y).unwrap();
        let x = model.embed_prompt(&prompt).unwrap();
        let att = model.cross_attention(&x, &y).unwrap();
        assert_eq!(sim, model.similarity(&att, &y).unwrap());
        assert_eq!(cor, model.gradcam_correlation(&att, &y).unwrap());
        assert_eq!(model.match_prompt(&prompt, &y).unwrap().1, cor);
        assert!(model.match_prompt_at_layer(1, &prompt, &y).is_err());
    }

    #[test]
    fn model_text_round_trip() {
        let model = MatchingModel::random(12, 3, 5, 4, 6).unwrap();
        let mut buf = Vec::new();
        model.write_text(&mut buf).unwrap();
        let back = MatchingModel::read_text(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn heatmap_pgm() {
        let cor = CorrelationMap::new(vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let pgm = cor.to_pgm(2, 2).unwrap();
        assert_eq!(pgm, "P2\n2 2\n255\n0 64\n128 255\n");
        assert!(cor.to_pgm(3, 1).is_err());
    }
}
