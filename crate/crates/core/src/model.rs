//! The fusion network and answer-scoring head.
//!
//! Visual region features and the question vector are projected into a
//! shared space, fused by multi-head self-attention, pooled, and scored by an
//! MLP. The logit for answer `i` is its candidate score `s_i`.
//!
//! Fusion modes:
//! - [`FusionMode::TokenSequence`]: `R` projected region tokens followed by one
//!   text token, self-attention then the feed-forward block; the text row is
//!   pooled.
//! - [`FusionMode::PaperLiteral`]: regions are averaged, both modalities are
//!   projected to `d_proj` and concatenated into a single `2·d_proj` token, and
//!   self-attention runs over that length-1 sequence. Softmax over one
//!   position is exactly 1, so the result is `w_o(w_v(x))` and the query/key
//!   projections never receive gradient.
//! - [`FusionMode::Concat`]: as `PaperLiteral` with attention removed.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{FeedForward, Linear, Mlp, MultiHeadAttention, NamedParams, Pass};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    PaperLiteral,
    TokenSequence,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Output row at the text-token position.
    TextToken,
    /// Mean over all sequence positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_visual: usize,
    pub d_text: usize,
    /// Per-modality projection width for `paper_literal` and `concat`.
    pub d_proj: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Feed-forward hidden width; `None` means `d_model`.
    pub d_ff: Option<usize>,
    pub mlp_hidden: Vec<usize>,
    pub n_answers: usize,
    pub fusion_mode: FusionMode,
    pub pooling: Pooling,
    pub regions: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    /// Desk-scale reference configuration.
    fn default() -> Self {
        Self {
            d_visual: 32,
            d_text: 16,
            d_proj: 32,
            d_model: 64,
            heads: 4,
            d_ff: None,
            mlp_hidden: vec![64, 32],
            n_answers: 8,
            fusion_mode: FusionMode::TokenSequence,
            pooling: Pooling::TextToken,
            regions: 3,
            dropout_rate: 0.5,
        }
    }
}

impl ModelConfig {
    /// Full-size widths: 2048-d regions and 768-d text projected to 1024
    /// each, an 8×256 attention over the 2048-d concatenation, MLP
    /// 1024/512/256.
    pub fn paper(n_answers: usize) -> Self {
        Self {
            d_visual: 2048,
            d_text: 768,
            d_proj: 1024,
            d_model: 2048,
            heads: 8,
            d_ff: None,
            mlp_hidden: vec![1024, 512, 256],
            n_answers,
            fusion_mode: FusionMode::PaperLiteral,
            pooling: Pooling::TextToken,
            regions: 1,
            dropout_rate: 0.5,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d_visual: 6,
            d_text: 4,
            d_proj: 4,
            d_model: 8,
            heads: 2,
            d_ff: None,
            mlp_hidden: vec![6, 5],
            n_answers: 3,
            fusion_mode: FusionMode::TokenSequence,
            pooling: Pooling::TextToken,
            regions: 2,
            dropout_rate: 0.5,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(self.d_model)
    }

    /// Width of the pooled vector entering the scoring head.
    pub fn pooled_width(&self) -> usize {
        match self.fusion_mode {
            FusionMode::TokenSequence => self.d_model,
            FusionMode::PaperLiteral | FusionMode::Concat => 2 * self.d_proj,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_visual, self.d_text, self.d_proj, self.d_model, self.heads, self.regions];
        if dims.contains(&0) || self.mlp_hidden.contains(&0) || self.d_ff() == 0 {
            return config_err("all model widths, heads and regions must be positive");
        }
        if self.n_answers < 2 {
            return config_err(format!("need at least 2 answers, got {}", self.n_answers));
        }
        if self.fusion_mode != FusionMode::Concat && self.d_model % self.heads != 0 {
            return config_err(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.fusion_mode == FusionMode::PaperLiteral && self.d_model != 2 * self.d_proj {
            return config_err(format!(
                "paper_literal fusion needs d_model = 2·d_proj, got {} and {}",
                self.d_model, self.d_proj
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return config_err(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RankVqaModel {
    config: ModelConfig,
    pub visual_proj: Linear,
    pub text_proj: Linear,
    pub fusion: Option<MultiHeadAttention>,
    pub ffn: Option<FeedForward>,
    pub head: Mlp,
}

/// Flattened features for one batch.
struct Inputs {
    batch: usize,
    regions: usize,
    visual: Vec<f64>,
    text: Vec<f64>,
}

impl RankVqaModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let proj = match config.fusion_mode {
            FusionMode::TokenSequence => config.d_model,
            FusionMode::PaperLiteral | FusionMode::Concat => config.d_proj,
        };
        let visual_proj = Linear::new("visual_proj", config.d_visual, proj, rng)?;
        let text_proj = Linear::new("text_proj", config.d_text, proj, rng)?;
        let fusion = match config.fusion_mode {
            FusionMode::Concat => None,
            _ => Some(MultiHeadAttention::new("fusion", config.d_model, config.heads, rng)?),
        };
        let ffn = match config.fusion_mode {
            FusionMode::TokenSequence => Some(FeedForward::new("ffn", config.d_model, config.d_ff(), rng)?),
            _ => None,
        };
        let head = Mlp::new(
            "head",
            config.pooled_width(),
            &config.mlp_hidden,
            config.n_answers,
            config.dropout_rate,
            rng,
        )?;
        Ok(Self { config, visual_proj, text_proj, fusion, ffn, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every learnable tensor with its stable name, in a fixed order.
    pub fn params(&self) -> NamedParams {
        let mut p = self.visual_proj.params();
        p.extend(self.text_proj.params());
        if let Some(f) = &self.fusion {
            p.extend(f.params());
        }
        if let Some(f) = &self.ffn {
            p.extend(f.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params().iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        let params = self.params();
        if params.len() != snapshot.len() {
            return dim_err(format!("snapshot has {} tensors, model has {}", snapshot.len(), params.len()));
        }
        for ((name, t), values) in params.iter().zip(snapshot) {
            if t.numel() != values.len() {
                return dim_err(format!("snapshot size mismatch for {name}"));
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    /// Hash of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.params() {
            name.hash(&mut h);
            t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let c = &self.config;
        if s.text.len() != c.d_text {
            return dim_err(format!("sample {}: text width {}, model expects {}", s.id, s.text.len(), c.d_text));
        }
        if let Some(r) = s.visual.iter().find(|r| r.len() != c.d_visual) {
            return dim_err(format!("sample {}: region width {}, model expects {}", s.id, r.len(), c.d_visual));
        }
        if s.visual.is_empty() {
            return dim_err(format!("sample {}: no visual regions", s.id));
        }
        if c.fusion_mode == FusionMode::TokenSequence && s.visual.len() != c.regions {
            return dim_err(format!("sample {}: {} regions, model expects {}", s.id, s.visual.len(), c.regions));
        }
        Ok(())
    }

    fn gather(&self, batch: &[&Sample]) -> Result<Inputs> {
        let Some(first) = batch.first() else {
            return dim_err("empty batch");
        };
        let regions = first.visual.len();
        for s in batch {
            self.check_sample(s)?;
            if s.visual.len() != regions {
                return dim_err("ragged batch: region counts differ");
            }
        }
        Ok(Inputs {
            batch: batch.len(),
            regions,
            visual: batch.iter().flat_map(|s| s.visual.iter().flatten().copied()).collect(),
            text: batch.iter().flat_map(|s| s.text.iter().copied()).collect(),
        })
    }

    fn forward_inputs(&self, x: Inputs, pass: &mut Pass) -> Result<Tensor> {
        let c = &self.config;
        let (b, r) = (x.batch, x.regions);
        let text = Tensor::new(vec![b, c.d_text], x.text)?;
        let pooled = match c.fusion_mode {
            FusionMode::TokenSequence => {
                let visual = Tensor::new(vec![b * r, c.d_visual], x.visual)?;
                let vp = self.visual_proj.forward(&visual, pass)?;
                let tp = self.text_proj.forward(&text, pass)?;
                let len = r + 1;
                // Reorder [all regions; all texts] into per-sample sequences.
                let order: Vec<usize> = (0..b)
                    .flat_map(|i| (i * r..(i + 1) * r).chain(std::iter::once(b * r + i)))
                    .collect();
                let seq = Tensor::concat(&[vp, tp], 0)?.select_rows(&order)?;
                let fusion = self.fusion.as_ref().expect("token_sequence has attention");
                let ffn = self.ffn.as_ref().expect("token_sequence has a feed-forward block");
                let y = ffn.forward(&fusion.forward(&seq, len, pass)?, pass)?;
                match c.pooling {
                    Pooling::TextToken => {
                        let rows: Vec<usize> = (0..b).map(|i| i * len + r).collect();
                        y.select_rows(&rows)?
                    }
                    Pooling::Mean => {
                        let mut avg = vec![0.0; b * b * len];
                        for i in 0..b {
                            avg[i * b * len + i * len..i * b * len + (i + 1) * len].fill(1.0 / len as f64);
                        }
                        Tensor::new(vec![b, b * len], avg)?.matmul(&y)?
                    }
                }
            }
            FusionMode::PaperLiteral | FusionMode::Concat => {
                let mut mean = vec![0.0; b * c.d_visual];
                for (i, m) in mean.chunks_mut(c.d_visual).enumerate() {
                    for reg in x.visual[i * r * c.d_visual..(i + 1) * r * c.d_visual].chunks(c.d_visual) {
                        m.iter_mut().zip(reg).for_each(|(a, v)| *a += v);
                    }
                    m.iter_mut().for_each(|a| *a /= r as f64);
                }
                let visual = Tensor::new(vec![b, c.d_visual], mean)?;
                let vp = self.visual_proj.forward(&visual, pass)?;
                let tp = self.text_proj.forward(&text, pass)?;
                let fused = Tensor::concat(&[vp, tp], 1)?;
                match &self.fusion {
                    Some(mha) => mha.forward(&fused, 1, pass)?,
                    None => fused,
                }
            }
        };
        self.head.forward(&pooled, pass)
    }

    /// Candidate scores `[B×A]` for a batch. Dropout masks are drawn
    /// independently for every element of the batch.
    pub fn forward_batch(&self, batch: &[&Sample], pass: &mut Pass) -> Result<Tensor> {
        let inputs = self.gather(batch)?;
        self.forward_inputs(inputs, pass)
    }

    /// Candidate scores `[A]` for one example given as `visual [R×d_visual]`
    /// and `text [d_text]`.
    pub fn forward(&self, visual: &Tensor, text: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let (r, dv) = visual.dims2("visual features")?;
        if dv != self.config.d_visual || text.shape() != [self.config.d_text] {
            return dim_err(format!(
                "feature shapes {:?} / {:?} do not match model widths {} / {}",
                visual.shape(),
                text.shape(),
                self.config.d_visual,
                self.config.d_text
            ));
        }
        if self.config.fusion_mode == FusionMode::TokenSequence && r != self.config.regions {
            return dim_err(format!("{r} regions, model expects {}", self.config.regions));
        }
        let inputs = Inputs { batch: 1, regions: r, visual: visual.to_vec(), text: text.to_vec() };
        self.forward_inputs(inputs, pass)?.reshape(vec![self.config.n_answers])
    }

    /// Evaluation-mode scores as plain rows.
    pub fn scores(&self, batch: &[&Sample]) -> Result<Vec<Vec<f64>>> {
        let mut rng = Rng::new(0);
        let mut pass = Pass::new(crate::nn::Mode::Eval, &mut rng);
        let logits = self.forward_batch(batch, &mut pass)?;
        let rows = logits.data().chunks(self.config.n_answers).map(|r| r.to_vec()).collect();
        Ok(rows)
    }

    /// One-paragraph description with the parameter count.
    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "fusion={:?} heads={} d_model={} d_proj={} mlp={:?} answers={} params={}",
            c.fusion_mode,
            c.heads,
            c.d_model,
            c.d_proj,
            c.mlp_hidden,
            c.n_answers,
            self.count_params()
        )
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

impl RankVqaModel {
    /// Checkpoint bytes: one JSON header line, then every parameter as raw
    /// little-endian `f64` in header order.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let params = self.params();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: params
                .iter()
                .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, t) in &params {
            for v in t.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse { line: 1, msg: "checkpoint header has no newline".into() })?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Parse { line: 1, msg: format!("checkpoint header: {e}") })?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported checkpoint version {}", header.format_version),
            });
        }
        let model = Self::new(header.config, &mut Rng::new(0))?;
        let params = model.params();
        let layout_ok = params.len() == header.params.len()
            && params
                .iter()
                .zip(&header.params)
                .all(|((n, t), e)| *n == e.name && t.shape() == e.shape.as_slice());
        if !layout_ok {
            return Err(Error::Parse { line: 1, msg: "parameter list does not match the configuration".into() });
        }
        let body = &bytes[split + 1..];
        let expected: usize = params.iter().map(|(_, t)| t.numel() * 8).sum();
        if body.len() != expected {
            return Err(Error::Parse {
                line: 2,
                msg: format!("checkpoint body is {} bytes, expected {expected}", body.len()),
            });
        }
        let mut chunks = body.chunks_exact(8);
        for (_, t) in &params {
            for v in t.data_mut().iter_mut() {
                let raw = chunks.next().expect("length checked above");
                *v = f64::from_le_bytes(raw.try_into().expect("chunk of 8"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}
