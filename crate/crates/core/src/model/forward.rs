use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{apply_adapter, AdapterVars};
use crate::error::{Error, Result};
use crate::guidance::Layout;
use crate::numerics::{Tape, Tensor, Var};

use super::params::{dec_prefix, enc_prefix};
use super::{Model, MultimodalInput};

/// Encoder states living on a [`Forward`] tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub layout: Layout,
}

/// Per-head attention probabilities and value vectors of one encoder layer.
#[derive(Clone, Debug, Default)]
pub struct LayerAttention {
    /// `S x S` attention matrices, one per head.
    pub weights: Vec<Tensor>,
    /// `S x d_head` value vectors, one per head.
    pub values: Vec<Tensor>,
}

/// One forward pass over a single tape.
///
/// Parameters are bound lazily: the first use of a name creates a leaf,
/// trainable leaves only when gradients were requested.
pub struct Forward<'m> {
    model: &'m Model,
    pub tape: Tape,
    bound: HashMap<String, Var>,
    track_grads: bool,
    dropout_rng: Option<ChaCha8Rng>,
    recorder: Option<Vec<LayerAttention>>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            tape: Tape::new(),
            bound: HashMap::new(),
            track_grads: false,
            dropout_rng: None,
            recorder: None,
        }
    }

    /// Enables gradient tracking for trainable parameters.
    pub fn with_grads(mut self) -> Self {
        self.track_grads = true;
        self
    }

    /// Enables dropout (when the configured rate is nonzero) drawing masks
    /// from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    /// Records encoder attention weights and value vectors.
    pub fn with_recording(mut self) -> Self {
        self.recorder = Some(Vec::new());
        self
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn recorded(&self) -> Option<&[LayerAttention]> {
        self.recorder.as_deref()
    }

    pub fn take_dropout_rng(&mut self) -> Option<ChaCha8Rng> {
        self.dropout_rng.take()
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self
            .model
            .params
            .param(name)
            .ok_or_else(|| Error::Registry(format!("missing parameter '{name}'")))?;
        let v = if self.track_grads && !param.frozen {
            self.tape.param(param.tensor.clone())
        } else {
            self.tape.constant(param.tensor.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn has(&self, name: &str) -> bool {
        self.model.params.contains(name)
    }

    /// Gradients of every bound trainable parameter reached by the last
    /// `backward` call.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.tape.requires_grad(v) {
                continue;
            }
            if let Some(g) = self.tape.grad(v) {
                let shape = self.tape.shape(v).to_vec();
                out.insert(name.clone(), Tensor::new(shape, g.to_vec()).expect("same shape"));
            }
        }
        out
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let h = self.tape.matmul(x, w)?;
        self.tape.add_row(h, b)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.config.dropout;
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.tape.value(x).numel();
        let mask: Rc<[f64]> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.tape.mul_const(x, mask)
    }

    fn maybe_adapter(&mut self, x: Var, prefix: &str) -> Result<Var> {
        if !self.has(&format!("{prefix}.down.w")) {
            return Ok(x);
        }
        let vars = AdapterVars {
            down: self.p(&format!("{prefix}.down.w"))?,
            down_bias: self.p(&format!("{prefix}.down.b"))?,
            up: self.p(&format!("{prefix}.up.w"))?,
            up_bias: self.p(&format!("{prefix}.up.b"))?,
        };
        apply_adapter(&mut self.tape, x, &vars)
    }

    fn add_norm(&mut self, x: Var, sub: Var, prefix: &str) -> Result<Var> {
        let s = self.tape.add(x, sub)?;
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.layer_norm(s, g, b, self.model.config.layer_norm_eps)
    }

    /// Multi-head attention of `queries` over `memory`. The mask, when
    /// given, is shared by every head.
    fn attention(
        &mut self,
        queries: Var,
        memory: Var,
        prefix: &str,
        mask: Option<&[bool]>,
        record: bool,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let (heads, dk) = (cfg.n_heads, cfg.head_dim());
        let q = self.linear(queries, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(memory, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut layer = LayerAttention::default();
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dk, dk)?;
            let kh = self.tape.slice_cols(k, h * dk, dk)?;
            let vh = self.tape.slice_cols(v, h * dk, dk)?;
            let scores = self.tape.matmul_bt(qh, kh)?;
            let scores = self.tape.scale(scores, scale);
            let a = self.tape.masked_softmax(scores, mask)?;
            if record {
                layer.weights.push(self.tape.value(a).clone());
                layer.values.push(self.tape.value(vh).clone());
            }
            outs.push(self.tape.matmul(a, vh)?);
        }
        if record {
            if let Some(rec) = self.recorder.as_mut() {
                rec.push(layer);
            }
        }
        let cat = self.tape.concat_cols(&outs)?;
        self.linear(cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn text_embedding(&mut self, ids: &[usize]) -> Result<Var> {
        let d = self.model.config.d_model;
        let table = self.p("embed.tokens")?;
        let e = self.tape.embedding(table, ids)?;
        let e = self.tape.scale(e, (d as f64).sqrt());
        let pe = self.tape.constant(sinusoidal(ids.len(), d));
        self.tape.add(e, pe)
    }

    /// Text embeddings with positions, then projected region features and
    /// the projected global feature. Visual rows carry no position signal.
    pub fn embed_inputs(&mut self, input: &MultimodalInput) -> Result<Var> {
        input.validate(&self.model.config)?;
        let mut parts = vec![self.text_embedding(&input.text_ids)?];
        let layout = input.guidance.layout();
        if layout.n_local > 0 {
            let x = self.tape.constant(input.local_features.clone());
            parts.push(self.linear(x, "visual.local.w", "visual.local.b")?);
        }
        if let Some(g) = &input.global_feature {
            let x = self.tape.constant(Tensor::matrix(1, g.len(), g.clone())?);
            parts.push(self.linear(x, "visual.global.w", "visual.global.b")?);
        }
        self.tape.concat_rows(&parts)
    }

    pub fn encode(&mut self, input: &MultimodalInput) -> Result<EncoderOutput> {
        let mut h = self.embed_inputs(input)?;
        let mask = input.guidance.as_mask();
        let record = self.recorder.is_some();
        for l in 0..self.model.config.n_encoder_layers {
            let p = enc_prefix(l);
            let a = self.attention(h, h, &format!("{p}.attn"), Some(mask), record)?;
            let a = self.dropout(a)?;
            let a = self.maybe_adapter(a, &format!("{p}.adapter_attn"))?;
            h = self.add_norm(h, a, &format!("{p}.ln1"))?;
            let f = self.ffn(h, &format!("{p}.ffn"))?;
            let f = self.dropout(f)?;
            let f = self.maybe_adapter(f, &format!("{p}.adapter_ffn"))?;
            h = self.add_norm(h, f, &format!("{p}.ln2"))?;
        }
        Ok(EncoderOutput {
            states: h,
            layout: input.guidance.layout(),
        })
    }

    /// Places externally supplied encoder states on this tape.
    pub fn encoder_constant(&mut self, states: &Tensor, layout: Layout) -> Result<EncoderOutput> {
        if states.rows() != layout.len() || states.cols() != self.model.config.d_model {
            return Err(Error::dim(
                "encoder states",
                states.shape(),
                &[layout.len(), self.model.config.d_model],
            ));
        }
        Ok(EncoderOutput {
            states: self.tape.constant(states.clone()),
            layout,
        })
    }

    /// Teacher-forced decoder logits, one row per prefix position.
    pub fn decode(&mut self, enc: &EncoderOutput, prefix: &[usize]) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::Contract("decoder prefix must start with BOS".into()));
        }
        let text = self.tape.slice_rows(enc.states, 0, enc.layout.text_len)?;
        let n = prefix.len();
        let causal: Vec<bool> = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        let mut h = self.text_embedding(prefix)?;
        for l in 0..self.model.config.n_decoder_layers {
            let p = dec_prefix(l);
            let a = self.attention(h, h, &format!("{p}.self"), Some(&causal), false)?;
            let a = self.dropout(a)?;
            let a = self.maybe_adapter(a, &format!("{p}.adapter_self"))?;
            h = self.add_norm(h, a, &format!("{p}.ln1"))?;
            let c = self.attention(h, text, &format!("{p}.cross"), None, false)?;
            let c = self.dropout(c)?;
            let c = self.maybe_adapter(c, &format!("{p}.adapter_cross"))?;
            h = self.add_norm(h, c, &format!("{p}.ln2"))?;
            let f = self.ffn(h, &format!("{p}.ffn"))?;
            let f = self.dropout(f)?;
            let f = self.maybe_adapter(f, &format!("{p}.adapter_ffn"))?;
            h = self.add_norm(h, f, &format!("{p}.ln3"))?;
        }
        self.linear(h, "dec.out.w", "dec.out.b")
    }

    /// Vocabulary logits predicted from encoder states at `positions`.
    pub fn vmlm_logits(&mut self, enc: &EncoderOutput, positions: &[usize]) -> Result<Var> {
        let mut rows = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= enc.layout.text_len {
                return Err(Error::Index {
                    what: "masked position",
                    index: p,
                    limit: enc.layout.text_len,
                });
            }
            rows.push(self.tape.slice_rows(enc.states, p, 1)?);
        }
        let h = self.tape.concat_rows(&rows)?;
        if self.has("vmlm.adapter_head.w") {
            self.linear(h, "vmlm.adapter_head.w", "vmlm.adapter_head.b")
        } else {
            self.linear(h, "dec.out.w", "dec.out.b")
        }
    }
}

/// Sinusoidal position table, `len x d`.
pub fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("sized")
}
