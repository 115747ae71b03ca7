//! Multi-head self-attention encoder blocks with pre-norm residual wiring:
//! `x <- x + MHSA(LN(x)); x <- x + FF(LN(x))`.
//!
//! Attention scores follow `softmax(q_i . k_j / sqrt(d_head))`; the scaling
//! uses the per-head width, so fixing d_model while varying the head count
//! changes d_head and the scale with it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Activation, Graph, NodeId, NumericsError, Parameter};
use crate::tensor::{Scalar, Tensor};

/// Per-layer, per-head matrix of normalized attention scores. Every row
/// sums to 1.
#[derive(Clone, Debug)]
pub struct AttentionMap<T: Scalar> {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<Vec<T>>,
}

/// State threaded through a forward pass: training mode (for dropout),
/// current layer index and optional attention capture.
pub struct ForwardCtx<'a, T: Scalar> {
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub capture_attention: bool,
    pub attention_maps: Vec<AttentionMap<T>>,
    pub layer: usize,
}

impl<T: Scalar> ForwardCtx<'_, T> {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: None,
            capture_attention: false,
            attention_maps: Vec::new(),
            layer: 0,
        }
    }

    pub fn capturing() -> Self {
        ForwardCtx {
            capture_attention: true,
            ..Self::eval()
        }
    }
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            train: true,
            rng: Some(rng),
            capture_attention: false,
            attention_maps: Vec::new(),
            layer: 0,
        }
    }
}

/// How the final token sequence collapses before the regression head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
}

pub fn pool<T: Scalar>(
    g: &mut Graph<T>,
    tokens: NodeId,
    pooling: Pooling,
) -> Result<NodeId, NumericsError> {
    let (rows, _) = g.value(tokens).dims2();
    let mean = g.mean_axis(tokens, 0)?;
    Ok(match pooling {
        Pooling::Mean => mean,
        Pooling::Sum => g.scale(mean, T::from_f64(rows as f64)),
    })
}

pub fn uniform_tensor<T: Scalar>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect(),
    )
}

/// One self-attention head: query/key/value projections into a
/// d_head = d_model / n_heads subspace.
pub struct AttentionHead<T: Scalar> {
    pub w_q: Parameter<T>,
    pub w_k: Parameter<T>,
    pub w_v: Parameter<T>,
    pub d_head: usize,
}

impl<T: Scalar> AttentionHead<T> {
    pub fn new(name: &str, d_model: usize, d_head: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionHead {
            w_q: Parameter::new(
                format!("{name}.w_q"),
                uniform_tensor(vec![d_model, d_head], d_model, rng),
            ),
            w_k: Parameter::new(
                format!("{name}.w_k"),
                uniform_tensor(vec![d_model, d_head], d_model, rng),
            ),
            w_v: Parameter::new(
                format!("{name}.w_v"),
                uniform_tensor(vec![d_model, d_head], d_model, rng),
            ),
            d_head,
        }
    }

    /// Normalized attention scores: softmax_j(q_i . k_j / sqrt(d_head)).
    pub fn attention_scores(
        &self,
        g: &mut Graph<T>,
        tokens: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let wq = g.param(&self.w_q);
        let wk = g.param(&self.w_k);
        let q = g.matmul(tokens, wq)?;
        let k = g.matmul(tokens, wk)?;
        let logits = g.matmul_nt(q, k)?;
        let scaled = g.scale(logits, T::from_f64(1.0 / (self.d_head as f64).sqrt()));
        Ok(g.softmax(scaled))
    }

    /// Attention-weighted sum of value projections; also returns the score
    /// matrix for capture.
    pub fn attend(
        &self,
        g: &mut Graph<T>,
        tokens: NodeId,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let scores = self.attention_scores(g, tokens)?;
        let wv = g.param(&self.w_v);
        let v = g.matmul(tokens, wv)?;
        let out = g.matmul(scores, v)?;
        Ok((out, scores))
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        vec![self.w_q.clone(), self.w_k.clone(), self.w_v.clone()]
    }
}

/// MHSA + position-wise feed-forward with pre-norm residuals.
pub struct EncoderBlock<T: Scalar> {
    pub heads: Vec<AttentionHead<T>>,
    pub w_o: Parameter<T>,
    pub ff_w1: Parameter<T>,
    pub ff_b1: Parameter<T>,
    pub ff_w2: Parameter<T>,
    pub ff_b2: Parameter<T>,
    pub ln1_gain: Parameter<T>,
    pub ln1_bias: Parameter<T>,
    pub ln2_gain: Parameter<T>,
    pub ln2_bias: Parameter<T>,
    pub activation: Activation,
    pub dropout: f64,
    pub ln_eps: T,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(
        name: &str,
        d_model: usize,
        n_heads: usize,
        ff_width: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            d_model % n_heads == 0,
            "d_model must be divisible by n_heads"
        );
        let d_head = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|h| AttentionHead::new(&format!("{name}.head{h}"), d_model, d_head, rng))
            .collect();
        EncoderBlock {
            heads,
            w_o: Parameter::new(
                format!("{name}.w_o"),
                uniform_tensor(vec![d_model, d_model], d_model, rng),
            ),
            ff_w1: Parameter::new(
                format!("{name}.ff_w1"),
                uniform_tensor(vec![d_model, ff_width], d_model, rng),
            ),
            ff_b1: Parameter::new(format!("{name}.ff_b1"), Tensor::zeros(vec![ff_width])),
            ff_w2: Parameter::new(
                format!("{name}.ff_w2"),
                uniform_tensor(vec![ff_width, d_model], ff_width, rng),
            ),
            ff_b2: Parameter::new(format!("{name}.ff_b2"), Tensor::zeros(vec![d_model])),
            ln1_gain: Parameter::new(
                format!("{name}.ln1_gain"),
                Tensor::new(vec![d_model], vec![T::one(); d_model]),
            ),
            ln1_bias: Parameter::new(format!("{name}.ln1_bias"), Tensor::zeros(vec![d_model])),
            ln2_gain: Parameter::new(
                format!("{name}.ln2_gain"),
                Tensor::new(vec![d_model], vec![T::one(); d_model]),
            ),
            ln2_bias: Parameter::new(format!("{name}.ln2_bias"), Tensor::zeros(vec![d_model])),
            activation,
            dropout,
            ln_eps: T::from_f64(1e-5),
        }
    }

    fn maybe_dropout(&self, g: &mut Graph<T>, x: NodeId, ctx: &mut ForwardCtx<'_, T>) -> NodeId {
        if ctx.train && self.dropout > 0.0 {
            let rng = ctx.rng.as_mut().expect("training context carries an rng");
            g.dropout(x, T::from_f64(self.dropout), rng)
        } else {
            x
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: NodeId,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, NumericsError> {
        // x <- x + MHSA(LN(x))
        let ln1_gain = g.param(&self.ln1_gain);
        let ln1_bias = g.param(&self.ln1_bias);
        let normed = g.layer_norm(tokens, ln1_gain, ln1_bias, self.ln_eps)?;
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let (out, scores) = head.attend(g, normed)?;
            if ctx.capture_attention {
                let m = g.value(scores);
                let (rows, _) = m.dims2();
                ctx.attention_maps.push(AttentionMap {
                    layer: ctx.layer,
                    head: h,
                    weights: (0..rows).map(|i| m.row(i).to_vec()).collect(),
                });
            }
            head_outs.push(out);
        }
        let concat = g.concat_cols(&head_outs)?;
        let wo = g.param(&self.w_o);
        let projected = g.matmul(concat, wo)?;
        let projected = self.maybe_dropout(g, projected, ctx);
        let x = g.add(tokens, projected)?;

        // x <- x + FF(LN(x))
        let ln2_gain = g.param(&self.ln2_gain);
        let ln2_bias = g.param(&self.ln2_bias);
        let normed = g.layer_norm(x, ln2_gain, ln2_bias, self.ln_eps)?;
        let w1 = g.param(&self.ff_w1);
        let b1 = g.param(&self.ff_b1);
        let w2 = g.param(&self.ff_w2);
        let b2 = g.param(&self.ff_b2);
        let hidden = g.matmul(normed, w1)?;
        let hidden = g.add_row(hidden, b1)?;
        let hidden = g.activation(hidden, self.activation);
        let out = g.matmul(hidden, w2)?;
        let out = g.add_row(out, b2)?;
        let out = self.maybe_dropout(g, out, ctx);
        g.add(x, out)
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut params: Vec<Parameter<T>> =
            self.heads.iter().flat_map(|h| h.parameters()).collect();
        params.extend([
            self.w_o.clone(),
            self.ff_w1.clone(),
            self.ff_b1.clone(),
            self.ff_w2.clone(),
            self.ff_b2.clone(),
            self.ln1_gain.clone(),
            self.ln1_bias.clone(),
            self.ln2_gain.clone(),
            self.ln2_bias.clone(),
        ]);
        params
    }

    /// Zero the attention and feed-forward weights, turning the block into
    /// an identity (useful as a control in tests).
    pub fn zero_weights(&self) {
        for head in &self.heads {
            for p in head.parameters() {
                p.set_value(Tensor::zeros(p.shape()));
            }
        }
        for p in [&self.w_o, &self.ff_w1, &self.ff_b1, &self.ff_w2, &self.ff_b2] {
            p.set_value(Tensor::zeros(p.shape()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn tokens(g: &mut Graph<f64>, rows: usize, d: usize, seed: u64) -> NodeId {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * d).map(|_| r.random_range(-1.0..1.0)).collect();
        g.input(Tensor::matrix(rows, d, data))
    }

    #[test]
    fn zero_query_weights_give_uniform_rows() {
        let mut g = Graph::new();
        let head = AttentionHead::<f64>::new("h", 4, 2, &mut rng());
        head.w_q.set_value(Tensor::zeros(vec![4, 2]));
        let x = tokens(&mut g, 5, 4, 1);
        let scores = head.attention_scores(&mut g, x).unwrap();
        for i in 0..5 {
            for &v in g.value(scores).row(i) {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut g = Graph::new();
        let head = AttentionHead::<f64>::new("h", 4, 2, &mut rng());
        let x = tokens(&mut g, 1, 4, 2);
        let scores = head.attention_scores(&mut g, x).unwrap();
        assert_eq!(g.value(scores).data(), &[1.0]);
    }

    #[test]
    fn hand_set_logits_give_quarter_three_quarters() {
        // d_model = 2, d_head = 2, tokens e0 and e1. Row 0 logits become
        // [0, ln 3] after the 1/sqrt(2) scaling.
        let mut g = Graph::new();
        let head = AttentionHead::<f64>::new("h", 2, 2, &mut rng());
        let s = 2.0f64.sqrt();
        let ln3 = 3.0f64.ln();
        head.w_q
            .set_value(Tensor::matrix(2, 2, vec![s, 0.0, 0.0, 0.0]));
        head.w_k
            .set_value(Tensor::matrix(2, 2, vec![0.0, 1.0, ln3, 0.0]));
        let x = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let scores = head.attention_scores(&mut g, x).unwrap();
        let row = g.value(scores).row(0);
        assert!((row[0] - 0.25).abs() < 1e-12, "{row:?}");
        assert!((row[1] - 0.75).abs() < 1e-12, "{row:?}");
    }

    #[test]
    fn uniform_attention_averages_values() {
        let mut g = Graph::new();
        let head = AttentionHead::<f64>::new("h", 4, 2, &mut rng());
        head.w_q.set_value(Tensor::zeros(vec![4, 2]));
        let x = tokens(&mut g, 3, 4, 3);
        let (out, _) = head.attend(&mut g, x).unwrap();
        // expected: mean over value projections
        let wv = g.param(&head.w_v);
        let v = g.matmul(x, wv).unwrap();
        let mean = g.mean_axis(v, 0).unwrap();
        for i in 0..3 {
            for (a, b) in g.value(out).row(i).iter().zip(g.value(mean).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_logits_select_one_value() {
        // logits [0, 2000] underflow to an exact one-hot after max
        // subtraction, so o_0 equals v_1 bitwise.
        let mut g = Graph::new();
        let head = AttentionHead::<f64>::new("h", 2, 2, &mut rng());
        let s = 2.0f64.sqrt();
        head.w_q
            .set_value(Tensor::matrix(2, 2, vec![s, 0.0, 0.0, 0.0]));
        head.w_k
            .set_value(Tensor::matrix(2, 2, vec![0.0, 1.0, 2000.0, 0.0]));
        let x = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let (out, scores) = head.attend(&mut g, x).unwrap();
        assert_eq!(g.value(scores).row(0), &[0.0, 1.0]);
        let wv = g.param(&head.w_v);
        let v = g.matmul(x, wv).unwrap();
        assert_eq!(g.value(out).row(0), g.value(v).row(1));
    }

    #[test]
    fn appended_duplicate_token_renormalizes_as_direct_summation() {
        let mut g = Graph::new();
        let head = AttentionHead::<f64>::new("h", 4, 2, &mut rng());
        let base = tokens(&mut g, 3, 4, 7);
        let dup_row = g.slice_rows(base, 2, 1).unwrap();
        let extended = g.concat_rows(&[base, dup_row]).unwrap();
        let (out_ext, _) = head.attend(&mut g, extended).unwrap();

        // brute-force re-evaluation from raw projections
        let wq = g.param(&head.w_q);
        let wk = g.param(&head.w_k);
        let wv = g.param(&head.w_v);
        let q = g.matmul(extended, wq).unwrap();
        let k = g.matmul(extended, wk).unwrap();
        let v = g.matmul(extended, wv).unwrap();
        let (qv, kv, vv) = (g.value(q).clone(), g.value(k).clone(), g.value(v).clone());
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| {
                    qv.row(i)
                        .iter()
                        .zip(kv.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / 2.0f64.sqrt()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut expected = vec![0.0; 2];
            for j in 0..4 {
                for c in 0..2 {
                    expected[c] += exps[j] / sum * vv.row(j)[c];
                }
            }
            for (a, b) in g.value(out_ext).row(i).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut g = Graph::new();
        let block = EncoderBlock::<f64>::new("b", 4, 2, 8, Activation::Gelu, 0.0, &mut rng());
        block.zero_weights();
        let x = tokens(&mut g, 6, 4, 9);
        let y = block.forward(&mut g, x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn block_preserves_shape() {
        let mut g = Graph::new();
        let block = EncoderBlock::<f64>::new("b", 4, 2, 8, Activation::Gelu, 0.0, &mut rng());
        for rows in [1, 3, 9] {
            let x = tokens(&mut g, rows, 4, rows as u64);
            let y = block.forward(&mut g, x, &mut ForwardCtx::eval()).unwrap();
            assert_eq!(g.value(y).shape(), &[rows, 4]);
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut g = Graph::new();
        let block = EncoderBlock::<f64>::new("b", 4, 2, 8, Activation::Gelu, 0.0, &mut rng());
        let x = tokens(&mut g, 5, 4, 13);
        let y = block.forward(&mut g, x, &mut ForwardCtx::eval()).unwrap();
        let perm = vec![3, 0, 4, 1, 2];
        let xp = g.permute_rows(x, perm.clone()).unwrap();
        let yp = block.forward(&mut g, xp, &mut ForwardCtx::eval()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in g.value(yp).row(i).iter().zip(g.value(y).row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::new();
        let block = EncoderBlock::<f64>::new("b", 8, 4, 16, Activation::Gelu, 0.0, &mut rng());
        let x = tokens(&mut g, 7, 8, 21);
        let mut ctx = ForwardCtx::capturing();
        block.forward(&mut g, x, &mut ctx).unwrap();
        assert_eq!(ctx.attention_maps.len(), 4);
        for map in &ctx.attention_maps {
            for row in &map.weights {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
