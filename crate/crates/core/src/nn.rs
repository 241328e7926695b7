//! Parameterised layers: linear maps, inverted dropout, scaled dot-product
//! and multi-head self-attention, the position-wise feed-forward block and an
//! MLP stack.
//!
//! Weights are Glorot-uniform, biases zero. There is no layer norm, no
//! residual path and no positional encoding anywhere in this module.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Hook applied to every parameter as it enters the graph. Used for fault
/// injection by the gradient checker; `None` means the identity.
pub type ParamTap<'a> = &'a dyn Fn(&str, &Tensor) -> Tensor;

/// Per-forward-pass context.
pub struct Pass<'a> {
    pub mode: Mode,
    pub rng: &'a mut Rng,
    pub tap: Option<ParamTap<'a>>,
}

impl<'a> Pass<'a> {
    pub fn new(mode: Mode, rng: &'a mut Rng) -> Self {
        Self { mode, rng, tap: None }
    }

    fn param(&self, name: &str, p: &Tensor) -> Tensor {
        match self.tap {
            Some(tap) => tap(name, p),
            None => p.clone(),
        }
    }
}

pub type NamedParams = Vec<(String, Tensor)>;

/// Fully connected layer, `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero bias.
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let name = name.into();
        if fan_in == 0 || fan_out == 0 {
            return dim_err(format!("{name}: linear layer {fan_in}->{fan_out} has a zero dimension"));
        }
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
        Ok(Self {
            weight: Tensor::param(vec![fan_out, fan_in], w)?,
            bias: Tensor::param(vec![fan_out], vec![0.0; fan_out])?,
            name,
        })
    }

    pub fn from_parts(name: impl Into<String>, weight: Tensor, bias: Tensor) -> Result<Self> {
        let name = name.into();
        let (out, _) = weight.dims2("linear weight")?;
        if bias.shape() != [out] {
            return dim_err(format!(
                "{name}: bias shape {:?} does not match weight shape {:?}",
                bias.shape(),
                weight.shape()
            ));
        }
        Ok(Self { name, weight, bias })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x[n×in] -> [n×out]`.
    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let w = pass.param(&format!("{}.weight", self.name), &self.weight);
        let b = pass.param(&format!("{}.bias", self.name), &self.bias);
        x.matmul(&w.transpose()?)?.add_row(&b)
    }

    pub fn params(&self) -> NamedParams {
        vec![
            (format!("{}.weight", self.name), self.weight.clone()),
            (format!("{}.bias", self.name), self.bias.clone()),
        ]
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)` at train time so
/// evaluation is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return config_err(format!("dropout rate must be in [0, 1), got {rate}"));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask = (0..x.numel())
            .map(|_| if rng.bernoulli(keep) { scale } else { 0.0 })
            .collect();
        x.mul(&Tensor::new(x.shape().to_vec(), mask)?)
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (lq, dq) = q.dims2("attention q")?;
    let (lk, dk) = k.dims2("attention k")?;
    let (lv, _) = v.dims2("attention v")?;
    if dq != dk || lk != lv {
        return dim_err(format!(
            "attention: incompatible q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok((lq, dk))
}

/// `softmax(q·kᵀ / √d_k)`, one row per query.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, dk) = check_qkv(q, k, k)?;
    q.matmul(&k.transpose()?)?.scale(1.0 / (dk as f64).sqrt()).softmax_rows()
}

/// Scaled dot-product attention `softmax(q·kᵀ / √d_k)·v`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    attention_weights(q, k)?.matmul(v)
}

/// Multi-head self-attention over `d_model` columns split into `heads`
/// contiguous slices of width `d_k = d_model / heads`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: usize,
    d_model: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return config_err(format!("d_model {d_model} is not divisible into {heads} heads"));
        }
        Ok(Self {
            heads,
            d_model,
            w_q: Linear::new(format!("{name}.w_q"), d_model, d_model, rng)?,
            w_k: Linear::new(format!("{name}.w_k"), d_model, d_model, rng)?,
            w_v: Linear::new(format!("{name}.w_v"), d_model, d_model, rng)?,
            w_o: Linear::new(format!("{name}.w_o"), d_model, d_model, rng)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    fn check_input(&self, x: &Tensor, seq_len: usize) -> Result<usize> {
        let (rows, cols) = x.dims2("multi-head attention input")?;
        if cols != self.d_model {
            return dim_err(format!("attention input has {cols} columns, expected {}", self.d_model));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return dim_err(format!("{rows} rows do not split into sequences of length {seq_len}"));
        }
        Ok(rows / seq_len)
    }

    /// Self-attention over `x`, which stacks `x.rows / seq_len` independent
    /// sequences of length `seq_len`. Returns the same shape as `x`.
    pub fn forward(&self, x: &Tensor, seq_len: usize, pass: &Pass) -> Result<Tensor> {
        let n_seq = self.check_input(x, seq_len)?;
        let q = self.w_q.forward(x, pass)?;
        let k = self.w_k.forward(x, pass)?;
        let v = self.w_v.forward(x, pass)?;
        let dk = self.d_k();
        let mut per_seq = Vec::with_capacity(n_seq);
        for s in 0..n_seq {
            let rows = |t: &Tensor| {
                if n_seq == 1 {
                    Ok(t.clone())
                } else {
                    t.slice(0, s * seq_len, (s + 1) * seq_len)
                }
            };
            let (qs, ks, vs) = (rows(&q)?, rows(&k)?, rows(&v)?);
            let heads = (0..self.heads)
                .map(|h| {
                    let cols = |t: &Tensor| {
                        if self.heads == 1 {
                            Ok(t.clone())
                        } else {
                            t.slice(1, h * dk, (h + 1) * dk)
                        }
                    };
                    attention(&cols(&qs)?, &cols(&ks)?, &cols(&vs)?)
                })
                .collect::<Result<Vec<_>>>()?;
            per_seq.push(if heads.len() == 1 {
                heads.into_iter().next().expect("one head")
            } else {
                Tensor::concat(&heads, 1)?
            });
        }
        let joined = if per_seq.len() == 1 {
            per_seq.pop().expect("one sequence")
        } else {
            Tensor::concat(&per_seq, 0)?
        };
        self.w_o.forward(&joined, pass)
    }

    /// Attention weight matrices `[seq][head] -> [L×L]` for inspection.
    pub fn head_weights(&self, x: &Tensor, seq_len: usize) -> Result<Vec<Vec<Tensor>>> {
        let n_seq = self.check_input(x, seq_len)?;
        let mut rng = Rng::new(0);
        let pass = Pass::new(Mode::Eval, &mut rng);
        let q = self.w_q.forward(x, &pass)?.detach();
        let k = self.w_k.forward(x, &pass)?.detach();
        let dk = self.d_k();
        (0..n_seq)
            .map(|s| {
                let qs = q.slice(0, s * seq_len, (s + 1) * seq_len)?;
                let ks = k.slice(0, s * seq_len, (s + 1) * seq_len)?;
                (0..self.heads)
                    .map(|h| {
                        attention_weights(
                            &qs.slice(1, h * dk, (h + 1) * dk)?,
                            &ks.slice(1, h * dk, (h + 1) * dk)?,
                        )
                    })
                    .collect()
            })
            .collect()
    }

    pub fn params(&self) -> NamedParams {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Position-wise feed-forward block `relu(x·W₁ᵀ + b₁)·W₂ᵀ + b₂`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(name: &str, d_model: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(format!("{name}.w1"), d_model, d_ff, rng)?,
            w2: Linear::new(format!("{name}.w2"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let h = self.w1.forward(x, pass)?.relu();
        self.w2.forward(&h, pass)
    }

    pub fn params(&self) -> NamedParams {
        let mut p = self.w1.params();
        p.extend(self.w2.params());
        p
    }
}

/// Linear layers with ReLU and dropout after every hidden layer; the last
/// layer emits raw logits.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    dropout: Dropout,
}

impl Mlp {
    pub fn new(
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dropout = Dropout::new(dropout_rate)?;
        let widths: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, dropout })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, pass)?;
            if i < last {
                h = self.dropout.forward(&h.relu(), pass.mode, pass.rng)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> NamedParams {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn fresh_linear_has_zero_bias_and_is_seeded() {
        let a = Linear::new("l", 5, 3, &mut Rng::new(7)).unwrap();
        let b = Linear::new("l", 5, 3, &mut Rng::new(7)).unwrap();
        assert_eq!(a.bias().to_vec(), vec![0.0; 3]);
        assert_eq!(a.weight().to_vec(), b.weight().to_vec());
        assert!(Linear::new("l", 0, 3, &mut Rng::new(7)).is_err());
    }

    #[test]
    fn glorot_variance() {
        let l = Linear::new("l", 256, 256, &mut Rng::new(3)).unwrap();
        let w = l.weight().to_vec();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 512.0;
        assert!((var - expected).abs() / expected < 0.2, "variance {var}");
    }

    #[test]
    fn dropout_modes() {
        let x = mat(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rng = Rng::new(1);
        let d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(&x, Mode::Eval, &mut rng).unwrap().to_vec(), x.to_vec());
        let d0 = Dropout::new(0.0).unwrap();
        assert_eq!(d0.forward(&x, Mode::Train, &mut rng).unwrap().to_vec(), x.to_vec());
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let n = 100_000;
        let x = Tensor::new(vec![n], vec![1.0; n]).unwrap();
        let y = Dropout::new(0.5).unwrap().forward(&x, Mode::Train, &mut Rng::new(11)).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn attention_single_position_returns_v() {
        let q = mat(1, 3, vec![0.3, -1.0, 2.0]);
        let k = mat(1, 3, vec![5.0, 1.0, -4.0]);
        let v = mat(1, 3, vec![7.0, 8.0, 9.0]);
        assert_eq!(attention(&q, &k, &v).unwrap().to_vec(), v.to_vec());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = mat(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]);
        let k = mat(3, 2, vec![0.4, -0.2, 0.4, -0.2, 0.4, -0.2]);
        let w = attention_weights(&q, &k).unwrap();
        for v in w.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_instance() {
        // Independently scripted: weights row0 = softmax([1/√2, 0]),
        // row1 = softmax([0, 1/√2]); output = weights · I.
        let eye = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = attention(&eye, &eye, &eye).unwrap().to_vec();
        let s = 1.0 / 2f64.sqrt();
        let hi = s.exp() / (s.exp() + 1.0);
        let lo = 1.0 / (s.exp() + 1.0);
        let expected = [hi, lo, lo, hi];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = mat(2, 2, vec![0.0; 4]);
        let k = mat(2, 3, vec![0.0; 6]);
        assert!(attention(&q, &k, &k).is_err());
    }

    #[test]
    fn mha_rejects_indivisible_width() {
        assert!(matches!(
            MultiHeadAttention::new("a", 10, 3, &mut Rng::new(0)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn mha_length_one_is_output_of_value_projection() {
        let mut rng = Rng::new(5);
        let mha = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let x = mat(1, 8, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect());
        let mut r = Rng::new(0);
        let pass = Pass::new(Mode::Eval, &mut r);
        let y = mha.forward(&x, 1, &pass).unwrap();
        let direct = mha.w_o.forward(&mha.w_v.forward(&x, &pass).unwrap(), &pass).unwrap();
        assert_eq!(y.to_vec(), direct.to_vec());
    }

    #[test]
    fn ffn_zero_and_identity() {
        let mut rng = Rng::new(1);
        let ffn = FeedForward::new("f", 3, 3, &mut rng).unwrap();
        for l in [&ffn.w1, &ffn.w2] {
            l.weight().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = mat(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let mut r = Rng::new(0);
        let pass = Pass::new(Mode::Eval, &mut r);
        assert_eq!(ffn.forward(&x, &pass).unwrap().to_vec(), vec![0.0; 6]);

        for l in [&ffn.w1, &ffn.w2] {
            let mut w = l.weight().data_mut();
            for i in 0..3 {
                w[i * 3 + i] = 1.0;
            }
        }
        let x = mat(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.5, 4.0]);
        assert_eq!(ffn.forward(&x, &pass).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn mlp_shapes_and_param_names() {
        let mut rng = Rng::new(2);
        let mlp = Mlp::new("head", 6, &[5, 4], 3, 0.5, &mut rng).unwrap();
        let names: Vec<String> = mlp.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["head.0.weight", "head.0.bias", "head.1.weight", "head.1.bias", "head.2.weight", "head.2.bias"]);
        let x = mat(2, 6, vec![0.1; 12]);
        let mut r = Rng::new(0);
        let mut pass = Pass::new(Mode::Train, &mut r);
        assert_eq!(mlp.forward(&x, &mut pass).unwrap().shape(), &[2, 3]);
    }
}
