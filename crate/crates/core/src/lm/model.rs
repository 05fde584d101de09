use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, BOS};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var, DEFAULT_LN_EPS};
use crate::scalar::Scalar;

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    /// `[d × 3d]`, query | key | value column blocks.
    pub attn_qkv: Tensor<S>,
    pub attn_qkv_bias: Tensor<S>,
    pub attn_out: Tensor<S>,
    pub attn_out_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub mlp_in: Tensor<S>,
    pub mlp_in_bias: Tensor<S>,
    pub mlp_out: Tensor<S>,
    pub mlp_out_bias: Tensor<S>,
}

/// Decoder-only causal transformer.
///
/// `embedding` is the token table (rows are the vocabulary points prompts are
/// projected onto); `head` maps final hidden states to vocabulary logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<S> {
    pub config: ModelConfig,
    pub embedding: Tensor<S>,
    pub positions: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub final_gain: Tensor<S>,
    pub final_bias: Tensor<S>,
    pub head: Tensor<S>,
    frozen: bool,
}

/// One element of a model input sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput<S> {
    Token(usize),
    Embedding(Vec<S>),
}

/// Contiguous run of inputs assembled inside a graph.
#[derive(Clone, Copy, Debug)]
pub enum Segment<'a> {
    Tokens(&'a [usize]),
    /// Rows `[n × d]` already recorded in the graph.
    Rows(Var),
}

const EMBED_STD: f64 = 0.5;
const POSITION_STD: f64 = 0.1;

impl<S: Scalar> LanguageModel<S> {
    /// Seeded random initialization.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        let v = config.vocab_size;
        let out_scale = 1.0 / ((2 * config.num_layers.max(1)) as f64).sqrt();
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<S> {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..n).map(|_| S::lit(dist.sample(&mut rng))).collect();
            Tensor::from_parts(shape, data)
        };
        let embedding = normal(vec![v, d], EMBED_STD);
        let positions = normal(vec![config.max_seq_len, d], POSITION_STD);
        let fan_d = 1.0 / (d as f64).sqrt();
        let fan_h = 1.0 / (h as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                attn_qkv: normal(vec![d, 3 * d], fan_d),
                attn_qkv_bias: zeros(3 * d),
                attn_out: normal(vec![d, d], fan_d * out_scale),
                attn_out_bias: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                mlp_in: normal(vec![d, h], fan_d),
                mlp_in_bias: zeros(h),
                mlp_out: normal(vec![h, d], fan_h * out_scale),
                mlp_out_bias: zeros(d),
            })
            .collect();
        let head = normal(vec![d, v], fan_d);
        Ok(Self {
            config,
            embedding,
            positions,
            blocks,
            final_gain: ones(d),
            final_bias: zeros(d),
            head,
            frozen: false,
        })
    }

    /// All-zero weights with unit layer-norm gains; a blank slate for hand-built models.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        let v = config.vocab_size;
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                attn_qkv: Tensor::zeros(vec![d, 3 * d]),
                attn_qkv_bias: zeros(3 * d),
                attn_out: Tensor::zeros(vec![d, d]),
                attn_out_bias: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                mlp_in: Tensor::zeros(vec![d, h]),
                mlp_in_bias: zeros(h),
                mlp_out: Tensor::zeros(vec![h, d]),
                mlp_out_bias: zeros(d),
            })
            .collect();
        Ok(Self {
            embedding: Tensor::zeros(vec![v, d]),
            positions: Tensor::zeros(vec![config.max_seq_len, d]),
            blocks,
            final_gain: ones(d),
            final_bias: zeros(d),
            head: Tensor::zeros(vec![d, v]),
            frozen: false,
            config,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model frozen; bound parameters will not request gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.for_each_param_mut(|_, t| {
            t.requires_grad = false;
            t.grad = None;
        });
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.for_each_param_mut(|_, t| t.requires_grad = true);
    }

    /// Parameters in canonical (checkpoint) order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("positions".to_string(), &self.positions),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in block_fields(b) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".into(), &self.final_gain));
        out.push(("final_ln.bias".into(), &self.final_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>)) {
        f("embedding", &mut self.embedding);
        f("positions", &mut self.positions);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let names = BLOCK_FIELD_NAMES;
            let fields = block_fields_mut(b);
            for (name, t) in names.iter().zip(fields) {
                f(&format!("blocks.{i}.{name}"), t);
            }
        }
        f("final_ln.gain", &mut self.final_gain);
        f("final_ln.bias", &mut self.final_bias);
        f("head", &mut self.head);
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a graph leaf.
    ///
    /// Leaves request gradients only when the model is not frozen.
    pub fn bind(&self, g: &mut Graph<S>) -> BoundModel {
        let trainable = !self.frozen;
        let mut leaf = |t: &Tensor<S>| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            g.leaf_owned(t)
        };
        let embedding = leaf(&self.embedding);
        let positions = leaf(&self.positions);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                ln1_gain: leaf(&b.ln1_gain),
                ln1_bias: leaf(&b.ln1_bias),
                attn_qkv: leaf(&b.attn_qkv),
                attn_qkv_bias: leaf(&b.attn_qkv_bias),
                attn_out: leaf(&b.attn_out),
                attn_out_bias: leaf(&b.attn_out_bias),
                ln2_gain: leaf(&b.ln2_gain),
                ln2_bias: leaf(&b.ln2_bias),
                mlp_in: leaf(&b.mlp_in),
                mlp_in_bias: leaf(&b.mlp_in_bias),
                mlp_out: leaf(&b.mlp_out),
                mlp_out_bias: leaf(&b.mlp_out_bias),
            })
            .collect();
        BoundModel {
            config: self.config.clone(),
            embedding,
            positions,
            blocks,
            final_gain: leaf(&self.final_gain),
            final_bias: leaf(&self.final_bias),
            head: leaf(&self.head),
        }
    }

    /// Next-token logits `[T × |X|]` for a mixed token / embedding-row input.
    pub fn forward(&self, inputs: &[ModelInput<S>]) -> Result<Tensor<S>> {
        if inputs.is_empty() {
            return Err(Error::Input("empty model input".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let mut segments = Vec::new();
        let mut row_vars = Vec::new();
        for item in inputs {
            match item {
                ModelInput::Token(id) => row_vars.push(bound.embed_tokens(&mut g, &[*id])?),
                ModelInput::Embedding(row) => {
                    if row.len() != self.embed_dim() {
                        return Err(Error::Dimension {
                            op: "lm_forward",
                            lhs: vec![row.len()],
                            rhs: vec![self.embed_dim()],
                        });
                    }
                    row_vars.push(g.constant(vec![1, row.len()], row.clone())?);
                }
            }
        }
        segments.extend(row_vars.iter().map(|&v| Segment::Rows(v)));
        let rows = bound.assemble(&mut g, &segments)?;
        let logits = bound.logits(&mut g, rows)?;
        Ok(g.value(logits).clone())
    }

    /// Logits for a plain token sequence.
    pub fn forward_tokens(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let rows = bound.assemble(&mut g, &[Segment::Tokens(tokens)])?;
        let logits = bound.logits(&mut g, rows)?;
        Ok(g.value(logits).clone())
    }

    /// Subtracts `lr * grad` from every parameter, given gradients in
    /// [`LanguageModel::named_params`] order.
    pub(crate) fn apply_update(&mut self, grads: &[Vec<S>], lr: S) {
        let mut i = 0;
        self.for_each_param_mut(|_, t| {
            for (p, &gv) in t.data_mut().iter_mut().zip(&grads[i]) {
                *p -= lr * gv;
            }
            i += 1;
        });
    }
}

/// Graph handles of a model's parameters.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub embedding: Var,
    pub positions: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head: Var,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub attn_qkv: Var,
    pub attn_qkv_bias: Var,
    pub attn_out: Var,
    pub attn_out_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_in: Var,
    pub mlp_in_bias: Var,
    pub mlp_out: Var,
    pub mlp_out_bias: Var,
}

impl BoundModel {
    /// Parameter handles in [`LanguageModel::named_params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding, self.positions];
        for b in &self.blocks {
            out.extend([
                b.ln1_gain,
                b.ln1_bias,
                b.attn_qkv,
                b.attn_qkv_bias,
                b.attn_out,
                b.attn_out_bias,
                b.ln2_gain,
                b.ln2_bias,
                b.mlp_in,
                b.mlp_in_bias,
                b.mlp_out,
                b.mlp_out_bias,
            ]);
        }
        out.extend([self.final_gain, self.final_bias, self.head]);
        out
    }

    pub fn embed_tokens<S: Scalar>(&self, g: &mut Graph<S>, ids: &[usize]) -> Result<Var> {
        g.gather_rows(self.embedding, ids)
    }

    /// Stacks token embeddings and raw rows into the `[T × d]` input matrix.
    pub fn assemble<S: Scalar>(&self, g: &mut Graph<S>, segments: &[Segment<'_>]) -> Result<Var> {
        let d = self.config.embed_dim;
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            match *seg {
                Segment::Tokens([]) => {}
                Segment::Tokens(ids) => parts.push(self.embed_tokens(g, ids)?),
                Segment::Rows(v) => {
                    if g.value(v).last_dim() != d || g.shape(v).len() != 2 {
                        return Err(Error::Dimension {
                            op: "lm_forward",
                            lhs: g.shape(v).to_vec(),
                            rhs: vec![d],
                        });
                    }
                    parts.push(v);
                }
            }
        }
        if parts.is_empty() {
            return Err(Error::Input("empty model input".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        g.concat_rows(&parts)
    }

    /// Final-layer-normed hidden states `[T × d]` for input rows `[T × d]`.
    pub fn hidden<S: Scalar>(&self, g: &mut Graph<S>, rows: Var) -> Result<Var> {
        let t = g.shape(rows)[0];
        if t > self.config.max_seq_len {
            return Err(Error::Length {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        let eps = S::lit(DEFAULT_LN_EPS);
        let pos = g.slice_rows(self.positions, 0, t)?;
        let mut x = g.add(rows, pos)?;
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        for b in &self.blocks {
            let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias, eps)?;
            let qkv = g.matmul(h, b.attn_qkv)?;
            let qkv = g.add_row(qkv, b.attn_qkv_bias)?;
            let mut head_outs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let q = g.slice_cols(qkv, hi * dh, (hi + 1) * dh)?;
                let k = g.slice_cols(qkv, d + hi * dh, d + (hi + 1) * dh)?;
                let v = g.slice_cols(qkv, 2 * d + hi * dh, 2 * d + (hi + 1) * dh)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.causal_softmax(scores)?;
                head_outs.push(g.matmul(attn, v)?);
            }
            let merged = if heads == 1 {
                head_outs[0]
            } else {
                g.concat_cols(&head_outs)?
            };
            let proj = g.matmul(merged, b.attn_out)?;
            let proj = g.add_row(proj, b.attn_out_bias)?;
            x = g.add(x, proj)?;

            let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias, eps)?;
            let up = g.matmul(h, b.mlp_in)?;
            let up = g.add_row(up, b.mlp_in_bias)?;
            let act = g.gelu(up)?;
            let down = g.matmul(act, b.mlp_out)?;
            let down = g.add_row(down, b.mlp_out_bias)?;
            x = g.add(x, down)?;
        }
        g.layer_norm(x, self.final_gain, self.final_bias, eps)
    }

    /// Applies the LM head to hidden states.
    pub fn head_logits<S: Scalar>(&self, g: &mut Graph<S>, hidden: Var) -> Result<Var> {
        g.matmul(hidden, self.head)
    }

    /// Full forward pass: `[T × d]` input rows to `[T × |X|]` logits.
    pub fn logits<S: Scalar>(&self, g: &mut Graph<S>, rows: Var) -> Result<Var> {
        let h = self.hidden(g, rows)?;
        self.head_logits(g, h)
    }

    /// Mean next-token NLL of `tokens` after a BOS context.
    ///
    /// With `prefix_embeddings` (rows `[L × d]`), those rows stand in for the
    /// tokens' own embeddings wherever the tokens serve as context, which
    /// makes the score differentiable with respect to them.
    pub fn sequence_nll<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        tokens: &[usize],
        prefix_embeddings: Option<Var>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("sequence_nll needs at least one token".into()));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: v,
            });
        }
        let n = tokens.len();
        let bos = [BOS];
        let rows = match prefix_embeddings {
            Some(p) => {
                if g.shape(p) != [n, self.config.embed_dim] {
                    return Err(Error::Dimension {
                        op: "sequence_nll",
                        lhs: g.shape(p).to_vec(),
                        rhs: vec![n, self.config.embed_dim],
                    });
                }
                if n == 1 {
                    self.assemble(g, &[Segment::Tokens(&bos)])?
                } else {
                    let context = g.slice_rows(p, 0, n - 1)?;
                    self.assemble(g, &[Segment::Tokens(&bos), Segment::Rows(context)])?
                }
            }
            None => self.assemble(
                g,
                &[Segment::Tokens(&bos), Segment::Tokens(&tokens[..n - 1])],
            )?,
        };
        let logits = self.logits(g, rows)?;
        g.cross_entropy_rows(logits, tokens)
    }
}

fn ones<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::from_parts(vec![n], vec![S::one(); n])
}

fn zeros<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::zeros(vec![n])
}

const BLOCK_FIELD_NAMES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.qkv",
    "attn.qkv_bias",
    "attn.out",
    "attn.out_bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.in",
    "mlp.in_bias",
    "mlp.out",
    "mlp.out_bias",
];

fn block_fields<S>(b: &Block<S>) -> [(&'static str, &Tensor<S>); 12] {
    let t = [
        &b.ln1_gain,
        &b.ln1_bias,
        &b.attn_qkv,
        &b.attn_qkv_bias,
        &b.attn_out,
        &b.attn_out_bias,
        &b.ln2_gain,
        &b.ln2_bias,
        &b.mlp_in,
        &b.mlp_in_bias,
        &b.mlp_out,
        &b.mlp_out_bias,
    ];
    std::array::from_fn(|i| (BLOCK_FIELD_NAMES[i], t[i]))
}

fn block_fields_mut<S>(b: &mut Block<S>) -> [&mut Tensor<S>; 12] {
    [
        &mut b.ln1_gain,
        &mut b.ln1_bias,
        &mut b.attn_qkv,
        &mut b.attn_qkv_bias,
        &mut b.attn_out,
        &mut b.attn_out_bias,
        &mut b.ln2_gain,
        &mut b.ln2_bias,
        &mut b.mlp_in,
        &mut b.mlp_in_bias,
        &mut b.mlp_out,
        &mut b.mlp_out_bias,
    ]
}
