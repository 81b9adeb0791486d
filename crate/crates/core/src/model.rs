//! Trainable systems `S = S_dec ∘ S_enc` split at a designated cut layer.
//!
//! Two architectures share one flat parameter array:
//!
//! * `mlp`: the input is the sum over positions of a shared token
//!   embedding plus a position-specific one, followed by `L` tanh layers and a softmax output head.
//! * `tiny-transformer-encoder`: token plus position embeddings, one
//!   single-head attention layer read out at the final position (layer 1),
//!   then `L − 1` residual tanh layers and the output head.
//!
//! Every layer activation is a vector; `decode` runs the layers above the
//! activation's layer and the head, so `decode(encode(s)) == forward(s)`
//! holds bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numeric::{cross_entropy_slice, softmax_slice, ProbDist, RealVector};
use crate::optim;
use crate::rng;
use crate::task::{Goodness, TaskDataset, TaskInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Arch {
    #[cfg_attr(feature = "serde", serde(rename = "mlp"))]
    Mlp,
    #[cfg_attr(feature = "serde", serde(rename = "tiny-transformer-encoder"))]
    TinyTransformer,
}

/// A channel injected at the cut layer that the decoder ignores by
/// construction: the last `dims` cut units are overwritten with
/// `tanh(scale · e)`, where `e` is a fixed random embedding of the token at
/// `position`, and the decoder weights reading those units are held at zero.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct NuisanceChannel {
    pub position: usize,
    pub dims: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SystemConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    /// Width of each of the `L` layers.
    pub hidden: Vec<usize>,
    pub cut_layer: usize,
    pub output_labels: Vec<String>,
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub nuisance: Option<NuisanceChannel>,
}

impl SystemConfig {
    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Width of the activation at the cut layer.
    pub fn cut_dim(&self) -> usize {
        self.hidden[self.cut_layer - 1]
    }

    pub fn layer_dim(&self, layer: usize) -> usize {
        self.hidden[layer - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.n_layers();
        if l == 0 {
            return Err(Error::InvalidConfig("system needs at least one layer".into()));
        }
        if self.cut_layer < 1 || self.cut_layer > l {
            return Err(Error::LayerOutOfRange {
                layer: self.cut_layer,
                layers: l,
            });
        }
        if self.embed_dim < 2 || self.hidden.iter().any(|&h| h < 2) {
            return Err(Error::InvalidConfig("all widths must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig("empty vocabulary or max_len".into()));
        }
        if self.output_labels.len() < 2 {
            return Err(Error::InvalidConfig("need at least two output labels".into()));
        }
        if self.arch == Arch::TinyTransformer && self.hidden.iter().any(|&h| h != self.embed_dim) {
            return Err(Error::InvalidConfig(
                "tiny-transformer-encoder layers must all have width embed_dim".into(),
            ));
        }
        if let Some(n) = &self.nuisance {
            if self.arch != Arch::Mlp {
                return Err(Error::InvalidConfig(
                    "nuisance channel needs the mlp architecture (residual layers would forward it)".into(),
                ));
            }
            if n.dims == 0 || n.dims >= self.cut_dim() {
                return Err(Error::InvalidConfig(format!(
                    "nuisance dims {} must be in 1..{}",
                    n.dims,
                    self.cut_dim()
                )));
            }
            if n.position >= self.max_len || !n.scale.is_finite() {
                return Err(Error::InvalidConfig("nuisance position or scale invalid".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the training inputs after the epoch.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingLog {
    pub stages: Vec<TrainingStage>,
    /// Per layer (index 0 = layer 1): min and max activation norm over the
    /// training inputs at the end of the last stage.
    pub activation_norm_range: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingStage {
    pub scope: String,
    pub hyper: Option<TrainHyper>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.stages.last()?.epochs.last().map(|e| e.train_loss)
    }
}

/// Which parameters a training stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    All,
    /// Embeddings and layers up to the cut; the decoder is frozen.
    Encoder,
}

/// An activation at some layer for one dataset input.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Activation {
    pub vector: RealVector,
    pub input_id: usize,
    pub layer: usize,
}

/// Map applied to an activation before decoding. `input_id` lets
/// input-specific maps refuse foreign inputs.
pub trait ActivationMap {
    fn apply_to(&self, input_id: usize, h: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    start: usize,
    len: usize,
}

impl Span {
    fn range(&self) -> core::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// Shared token embedding, vocab × embed.
    tok: Span,
    /// mlp: position-specific token embedding, max_len × vocab × embed;
    /// transformer: position embedding, max_len × embed.
    pos: Span,
    /// transformer only: Wq, Wk, Wv, Wo.
    attn: [Span; 4],
    /// (weights, bias) for every dense tanh layer; the transformer's entry
    /// for layer 1 is unused.
    layers: Vec<(Span, Span)>,
    head: (Span, Span),
    side: Span,
    total: usize,
}

impl Layout {
    fn new(c: &SystemConfig) -> Self {
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let s = Span { start: cursor, len };
            cursor += len;
            s
        };
        let e = c.embed_dim;
        let empty = Span { start: 0, len: 0 };
        let (tok, pos, attn) = match c.arch {
            Arch::Mlp => (
                take(c.vocab_size * e),
                take(c.max_len * c.vocab_size * e),
                [empty; 4],
            ),
            Arch::TinyTransformer => (
                take(c.vocab_size * e),
                take(c.max_len * e),
                [take(e * e), take(e * e), take(e * e), take(e * e)],
            ),
        };
        let mut layers = Vec::new();
        for k in 0..c.n_layers() {
            if c.arch == Arch::TinyTransformer && k == 0 {
                layers.push((empty, empty));
                continue;
            }
            let fan_in = if k == 0 { e } else { c.hidden[k - 1] };
            layers.push((take(c.hidden[k] * fan_in), take(c.hidden[k])));
        }
        let last = *c.hidden.last().unwrap();
        let n_out = c.output_labels.len();
        let head = (take(n_out * last), take(n_out));
        let side = match &c.nuisance {
            Some(n) => take(c.vocab_size * n.dims),
            None => empty,
        };
        let total = cursor;
        Self {
            tok,
            pos,
            attn,
            layers,
            head,
            side,
            total,
        }
    }
}

/// Dense `out = W·x + b` with `W` row-major `out × in`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + math::dot(&w[r * n_in..(r + 1) * n_in], x))
        .collect()
}

fn mat_vec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..rows)
        .map(|r| math::dot(&w[r * n_in..(r + 1) * n_in], x))
        .collect()
}

/// `Wᵀ·g` for row-major `W` with `g.len()` rows and `n_in` columns.
fn mat_t_vec(w: &[f64], g: &[f64], n_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_in];
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
            *o += wv * gr;
        }
    }
    out
}

/// `G += a·bᵀ` into a row-major block.
fn outer_add(grad: &mut [f64], a: &[f64], b: &[f64]) {
    let n = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        for (g, bv) in grad[r * n..(r + 1) * n].iter_mut().zip(b) {
            *g += ar * bv;
        }
    }
}

struct AttentionCache {
    xs: Vec<Vec<f64>>,
    q: Vec<f64>,
    ks: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    weights: Vec<f64>,
    context: Vec<f64>,
}

struct Trace {
    /// Embedding-layer output (mlp) or unused (transformer).
    x0: Vec<f64>,
    attention: Option<AttentionCache>,
    /// `hs[k]` is the activation at layer `k + 1`.
    hs: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct System {
    config: SystemConfig,
    params: Vec<f64>,
    layout: Layout,
    pub trained: bool,
    pub training_log: TrainingLog,
}

impl System {
    /// Untrained system with deterministic initialisation from `config.seed`.
    pub fn new(config: SystemConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut r = rng::seeded(config.seed);
        let e = config.embed_dim as f64;
        let mut fill = |span: Span, scale: f64, r: &mut rng::LabRng| {
            for p in &mut params[span.range()] {
                *p = scale * rng::gaussian(r);
            }
        };
        match config.arch {
            Arch::Mlp => {
                fill(layout.tok, 0.5, &mut r);
                fill(layout.pos, 0.5, &mut r);
            }
            Arch::TinyTransformer => {
                fill(layout.tok, 1.0, &mut r);
                fill(layout.pos, 1.0, &mut r);
                for s in layout.attn {
                    fill(s, 1.0 / math::sqrt(e), &mut r);
                }
            }
        }
        for (k, (w, _)) in layout.layers.iter().enumerate() {
            if w.len == 0 {
                continue;
            }
            let fan_in = if k == 0 { config.embed_dim } else { config.hidden[k - 1] };
            fill(*w, 1.0 / math::sqrt(fan_in as f64), &mut r);
        }
        let last = *config.hidden.last().unwrap() as f64;
        fill(layout.head.0, 1.0 / math::sqrt(last), &mut r);
        fill(layout.side, 1.0, &mut r);
        let mut sys = Self {
            config,
            params,
            layout,
            trained: false,
            training_log: TrainingLog::default(),
        };
        sys.zero_frozen_decoder_columns();
        Ok(sys)
    }

    /// Rebuilds a system from a flat parameter array in layout order.
    pub fn from_parameters(
        config: SystemConfig,
        params: Vec<f64>,
        trained: bool,
        training_log: TrainingLog,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                context: "system parameters",
                expected: layout.total,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("system parameters"));
        }
        Ok(Self {
            config,
            params,
            layout,
            trained,
            training_log,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers()
    }

    pub fn cut_layer(&self) -> usize {
        self.config.cut_layer
    }

    /// Mutable view of the weights of dense layer `layer` (1-based) and its
    /// bias, for handcrafted fixtures.
    pub fn layer_parameters_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layout.layers[layer - 1];
        let (lo, hi) = self.params.split_at_mut(b.start);
        (&mut lo[w.range()], &mut hi[..b.len])
    }

    /// Mutable views of the shared token embedding and the position
    /// embedding (see the layout for their shapes), for handcrafted fixtures.
    pub fn embedding_parameters_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (tok, pos) = (self.layout.tok, self.layout.pos);
        let (lo, hi) = self.params.split_at_mut(pos.start);
        (&mut lo[tok.range()], &mut hi[..pos.len])
    }

    /// Mutable view of the output head weights (row-major, labels × width)
    /// and bias.
    pub fn head_parameters_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layout.head;
        let (lo, hi) = self.params.split_at_mut(b.start);
        (&mut lo[w.range()], &mut hi[..b.len])
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < 1 || layer > self.n_layers() {
            return Err(Error::LayerOutOfRange {
                layer,
                layers: self.n_layers(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &TaskInput) -> Result<()> {
        if input.tokens.is_empty() || input.tokens.len() > self.config.max_len {
            return Err(Error::InvalidConfig(format!(
                "input length {} outside 1..={}",
                input.tokens.len(),
                self.config.max_len
            )));
        }
        if input.tokens.iter().any(|&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidConfig("token outside vocabulary".into()));
        }
        Ok(())
    }

    /// Units of the cut layer overwritten by the nuisance channel.
    fn nuisance_units(&self) -> core::ops::Range<usize> {
        match &self.config.nuisance {
            Some(n) => {
                let d = self.config.cut_dim();
                d - n.dims..d
            }
            None => 0..0,
        }
    }

    fn nuisance_values(&self, input: &TaskInput) -> Option<Vec<f64>> {
        let n = self.config.nuisance.as_ref()?;
        let side = &self.params[self.layout.side.range()];
        let values = match input.tokens.get(n.position) {
            Some(&t) => side[t as usize * n.dims..(t as usize + 1) * n.dims]
                .iter()
                .map(|v| math::tanh(n.scale * v))
                .collect(),
            None => vec![0.0; n.dims],
        };
        Some(values)
    }

    fn zero_frozen_decoder_columns(&mut self) {
        let units = self.nuisance_units();
        if units.is_empty() {
            return;
        }
        let cut = self.config.cut_layer;
        let d = self.config.cut_dim();
        let w = if cut == self.n_layers() {
            self.layout.head.0
        } else {
            self.layout.layers[cut].0
        };
        for r in 0..w.len / d {
            for c in units.clone() {
                self.params[w.start + r * d + c] = 0.0;
            }
        }
    }

    /// Parameters that never change during training in `scope`.
    fn frozen_mask(&self, scope: TrainScope) -> Vec<bool> {
        let mut mask = vec![false; self.layout.total];
        for i in self.layout.side.range() {
            mask[i] = true;
        }
        let units = self.nuisance_units();
        let cut = self.config.cut_layer;
        if !units.is_empty() {
            let d = self.config.cut_dim();
            let w = if cut == self.n_layers() {
                self.layout.head.0
            } else {
                self.layout.layers[cut].0
            };
            for r in 0..w.len / d {
                for c in units.clone() {
                    mask[w.start + r * d + c] = true;
                }
            }
        }
        if scope == TrainScope::Encoder {
            for (w, b) in &self.layout.layers[cut..] {
                for i in w.range().chain(b.range()) {
                    mask[i] = true;
                }
            }
            for i in self.layout.head.0.range().chain(self.layout.head.1.range()) {
                mask[i] = true;
            }
        }
        mask
    }

    fn dense(&self, layer: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layout.layers[layer - 1];
        (&self.params[w.range()], &self.params[b.range()])
    }

    fn head(&self) -> (&[f64], &[f64]) {
        (
            &self.params[self.layout.head.0.range()],
            &self.params[self.layout.head.1.range()],
        )
    }

    fn embed(&self, input: &TaskInput) -> Vec<f64> {
        let e = self.config.embed_dim;
        let v = self.config.vocab_size;
        let tok = &self.params[self.layout.tok.range()];
        let pos = &self.params[self.layout.pos.range()];
        let mut x = vec![0.0; e];
        for (p, &t) in input.tokens.iter().enumerate() {
            let shared = &tok[t as usize * e..(t as usize + 1) * e];
            let off = (p * v + t as usize) * e;
            for ((xi, a), b) in x.iter_mut().zip(shared).zip(&pos[off..off + e]) {
                *xi += a + b;
            }
        }
        x
    }

    fn attention(&self, input: &TaskInput) -> AttentionCache {
        let e = self.config.embed_dim;
        let tok = &self.params[self.layout.tok.range()];
        let pos = &self.params[self.layout.pos.range()];
        let xs: Vec<Vec<f64>> = input
            .tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                let t = t as usize;
                (0..e).map(|i| tok[t * e + i] + pos[p * e + i]).collect()
            })
            .collect();
        let [wq, wk, wv, _] = self.layout.attn.map(|s| &self.params[s.range()]);
        let last = xs.last().unwrap();
        let q = mat_vec(wq, last, e);
        let ks: Vec<Vec<f64>> = xs.iter().map(|x| mat_vec(wk, x, e)).collect();
        let vs: Vec<Vec<f64>> = xs.iter().map(|x| mat_vec(wv, x, e)).collect();
        let scale = 1.0 / math::sqrt(e as f64);
        let scores: Vec<f64> = ks.iter().map(|k| scale * math::dot(&q, k)).collect();
        let weights = softmax_slice(&scores);
        let mut context = vec![0.0; e];
        for (a, v) in weights.iter().zip(&vs) {
            for (c, vi) in context.iter_mut().zip(v) {
                *c += a * vi;
            }
        }
        AttentionCache {
            xs,
            q,
            ks,
            vs,
            weights,
            context,
        }
    }

    /// Activation at `layer` from the previous one (`prev` is the embedding
    /// output when `layer == 1`, ignored for the transformer's first layer).
    fn layer_forward(&self, layer: usize, prev: &[f64], attn: Option<&AttentionCache>) -> Vec<f64> {
        match self.config.arch {
            Arch::Mlp => {
                let (w, b) = self.dense(layer);
                affine(w, b, prev).into_iter().map(math::tanh).collect()
            }
            Arch::TinyTransformer if layer == 1 => {
                let a = attn.expect("attention cache");
                let wo = &self.params[self.layout.attn[3].range()];
                let mixed = mat_vec(wo, &a.context, self.config.embed_dim);
                a.xs.last()
                    .unwrap()
                    .iter()
                    .zip(mixed)
                    .map(|(x, m)| x + m)
                    .collect()
            }
            Arch::TinyTransformer => {
                let (w, b) = self.dense(layer);
                affine(w, b, prev)
                    .into_iter()
                    .zip(prev)
                    .map(|(z, p)| p + math::tanh(z))
                    .collect()
            }
        }
    }

    fn encode_raw(&self, input: &TaskInput, layer: usize) -> (Vec<f64>, Option<AttentionCache>, Vec<Vec<f64>>) {
        let (x0, attn) = match self.config.arch {
            Arch::Mlp => (self.embed(input), None),
            Arch::TinyTransformer => (Vec::new(), Some(self.attention(input))),
        };
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(layer);
        for k in 1..=layer {
            let prev = if k == 1 { &x0 } else { &hs[k - 2] };
            let mut h = self.layer_forward(k, prev, attn.as_ref());
            if k == self.config.cut_layer {
                if let Some(values) = self.nuisance_values(input) {
                    let units = self.nuisance_units();
                    h[units].copy_from_slice(&values);
                }
            }
            hs.push(h);
        }
        (x0, attn, hs)
    }

    fn decode_raw(&self, layer: usize, h: &[f64]) -> Vec<f64> {
        let mut cur = h.to_vec();
        for k in layer + 1..=self.n_layers() {
            cur = self.layer_forward(k, &cur, None);
        }
        let (w, b) = self.head();
        softmax_slice(&affine(w, b, &cur))
    }

    /// Activation of `input` at `layer`.
    pub fn encode(&self, input: &TaskInput, layer: usize) -> Result<RealVector> {
        self.check_layer(layer)?;
        self.check_input(input)?;
        let (_, _, mut hs) = self.encode_raw(input, layer);
        RealVector::new(hs.pop().unwrap())
    }

    pub fn encode_activation(&self, dataset: &TaskDataset, input_id: usize, layer: usize) -> Result<Activation> {
        Ok(Activation {
            vector: self.encode(&dataset.inputs[input_id], layer)?,
            input_id,
            layer,
        })
    }

    /// Output distribution from an activation at its layer.
    pub fn decode(&self, activation: &Activation) -> Result<ProbDist> {
        self.decode_vector(activation.layer, activation.vector.as_slice())
    }

    pub fn decode_vector(&self, layer: usize, h: &[f64]) -> Result<ProbDist> {
        self.check_layer(layer)?;
        if h.len() != self.config.layer_dim(layer) {
            return Err(Error::DimensionMismatch {
                context: "decode",
                expected: self.config.layer_dim(layer),
                got: h.len(),
            });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation"));
        }
        ProbDist::new(self.decode_raw(layer, h))
    }

    /// Full forward pass, defined as decode ∘ encode at the cut layer.
    pub fn forward(&self, input: &TaskInput) -> Result<ProbDist> {
        let cut = self.config.cut_layer;
        let h = self.encode(input, cut)?;
        self.decode_vector(cut, h.as_slice())
    }

    /// `decode(a(encode(input)))` at `layer`.
    pub fn forward_with_intervention<A: ActivationMap + ?Sized>(
        &self,
        input_id: usize,
        input: &TaskInput,
        intervention: &A,
        layer: usize,
    ) -> Result<ProbDist> {
        let h = self.encode(input, layer)?;
        let moved = intervention.apply_to(input_id, h.as_slice())?;
        if moved.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("intervened activation"));
        }
        self.decode_vector(layer, &moved)
    }

    /// Activations at `layer` for every input of the dataset.
    pub fn pattern_of_activations(&self, dataset: &TaskDataset, layer: usize) -> Result<Vec<Activation>> {
        (0..dataset.len())
            .map(|i| self.encode_activation(dataset, i, layer))
            .collect()
    }

    /// Output head applied directly to an activation at any layer.
    pub fn lens_readout(&self, activation: &Activation) -> Result<ProbDist> {
        self.check_layer(activation.layer)?;
        let (w, b) = self.head();
        let width = *self.config.hidden.last().unwrap();
        if activation.vector.dim() != width {
            return Err(Error::DimensionMismatch {
                context: "lens readout",
                expected: width,
                got: activation.vector.dim(),
            });
        }
        ProbDist::new(softmax_slice(&affine(w, b, activation.vector.as_slice())))
    }

    fn trace(&self, input: &TaskInput) -> Trace {
        let (x0, attention, hs) = self.encode_raw(input, self.n_layers());
        let (w, b) = self.head();
        let probs = softmax_slice(&affine(w, b, hs.last().unwrap()));
        Trace {
            x0,
            attention,
            hs,
            probs,
        }
    }

    /// Adds d loss / d params for one example into `grad`; returns its loss.
    fn backprop(&self, input: &TaskInput, target: &[f64], grad: &mut [f64]) -> f64 {
        let tr = self.trace(input);
        let loss = cross_entropy_slice(target, &tr.probs);
        let l = self.n_layers();
        let delta: Vec<f64> = tr.probs.iter().zip(target).map(|(p, y)| p - y).collect();
        let (hw, _) = self.layout.head;
        let last = &tr.hs[l - 1];
        outer_add(&mut grad[hw.range()], &delta, last);
        for (g, d) in grad[self.layout.head.1.range()].iter_mut().zip(&delta) {
            *g += d;
        }
        let mut g = mat_t_vec(&self.params[hw.range()], &delta, last.len());
        for k in (1..=l).rev() {
            if k == self.config.cut_layer {
                for u in self.nuisance_units() {
                    g[u] = 0.0;
                }
            }
            match (self.config.arch, k) {
                (Arch::TinyTransformer, 1) => {
                    self.attention_backprop(input, tr.attention.as_ref().unwrap(), &g, grad);
                }
                (arch, _) => {
                    let prev = if k == 1 { &tr.x0 } else { &tr.hs[k - 2] };
                    let h = &tr.hs[k - 1];
                    let t: Vec<f64> = match arch {
                        Arch::Mlp => h.clone(),
                        Arch::TinyTransformer => h.iter().zip(prev).map(|(a, b)| a - b).collect(),
                    };
                    let dz: Vec<f64> = g.iter().zip(&t).map(|(gi, ti)| gi * (1.0 - ti * ti)).collect();
                    let (w, b) = self.layout.layers[k - 1];
                    outer_add(&mut grad[w.range()], &dz, prev);
                    for (gb, d) in grad[b.range()].iter_mut().zip(&dz) {
                        *gb += d;
                    }
                    let back = mat_t_vec(&self.params[w.range()], &dz, prev.len());
                    g = match arch {
                        Arch::Mlp => back,
                        Arch::TinyTransformer => back.iter().zip(&g).map(|(a, b)| a + b).collect(),
                    };
                    if k == 1 {
                        // mlp embedding: scatter into shared and position-specific rows.
                        let e = self.config.embed_dim;
                        let v = self.config.vocab_size;
                        for (p, &t) in input.tokens.iter().enumerate() {
                            let shared = self.layout.tok.start + t as usize * e;
                            let off = self.layout.pos.start + (p * v + t as usize) * e;
                            for i in 0..e {
                                grad[shared + i] += g[i];
                                grad[off + i] += g[i];
                            }
                        }
                    }
                }
            }
        }
        loss
    }

    fn attention_backprop(&self, input: &TaskInput, a: &AttentionCache, g: &[f64], grad: &mut [f64]) {
        let e = self.config.embed_dim;
        let [sq, sk, sv, so] = self.layout.attn;
        let n = a.xs.len();
        let mut dx: Vec<Vec<f64>> = vec![vec![0.0; e]; n];
        // h1 = x_last + Wo·c
        for (d, gi) in dx[n - 1].iter_mut().zip(g) {
            *d += gi;
        }
        outer_add(&mut grad[so.range()], g, &a.context);
        let dc = mat_t_vec(&self.params[so.range()], g, e);
        let da: Vec<f64> = a.vs.iter().map(|v| math::dot(&dc, v)).collect();
        let mean_da: f64 = a.weights.iter().zip(&da).map(|(w, d)| w * d).sum();
        let scale = 1.0 / math::sqrt(e as f64);
        let mut dq = vec![0.0; e];
        for t in 0..n {
            let ds = a.weights[t] * (da[t] - mean_da);
            let dv: Vec<f64> = dc.iter().map(|c| a.weights[t] * c).collect();
            let dk: Vec<f64> = a.q.iter().map(|q| ds * scale * q).collect();
            for (dqi, k) in dq.iter_mut().zip(&a.ks[t]) {
                *dqi += ds * scale * k;
            }
            outer_add(&mut grad[sv.range()], &dv, &a.xs[t]);
            outer_add(&mut grad[sk.range()], &dk, &a.xs[t]);
            let back_v = mat_t_vec(&self.params[sv.range()], &dv, e);
            let back_k = mat_t_vec(&self.params[sk.range()], &dk, e);
            for i in 0..e {
                dx[t][i] += back_v[i] + back_k[i];
            }
        }
        outer_add(&mut grad[sq.range()], &dq, &a.xs[n - 1]);
        let back_q = mat_t_vec(&self.params[sq.range()], &dq, e);
        for (d, b) in dx[n - 1].iter_mut().zip(back_q) {
            *d += b;
        }
        let v = self.config.vocab_size;
        for (p, &t) in input.tokens.iter().enumerate() {
            let to = self.layout.tok.start + t as usize * e;
            let po = self.layout.pos.start + p * e;
            for i in 0..e {
                grad[to + i] += dx[p][i];
                grad[po + i] += dx[p][i];
            }
        }
        let _ = v;
    }

    /// Mean cross-entropy to the gold outputs over `indices`, and its
    /// gradient with respect to the flat parameter array.
    pub fn loss_and_gradient(&self, dataset: &TaskDataset, indices: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = 0.0;
        for &i in indices {
            loss += self.backprop(&dataset.inputs[i], dataset.gold_outputs[i].masses(), &mut grad);
        }
        let n = indices.len().max(1) as f64;
        for g in &mut grad {
            *g /= n;
        }
        (loss / n, grad)
    }

    /// Mean cross-entropy to the gold outputs over `indices`.
    pub fn mean_loss(&self, dataset: &TaskDataset, indices: &[usize]) -> f64 {
        let n = indices.len().max(1) as f64;
        indices
            .iter()
            .map(|&i| {
                let p = self.forward(&dataset.inputs[i]).expect("validated input");
                cross_entropy_slice(dataset.gold_outputs[i].masses(), p.masses())
            })
            .sum::<f64>()
            / n
    }

    /// Copy with a different flat parameter array (same layout).
    pub fn with_parameters(&self, params: Vec<f64>) -> Result<System> {
        System::from_parameters(self.config.clone(), params, self.trained, self.training_log.clone())
    }

    /// Fraction of `indices` whose argmax output matches the gold argmax.
    pub fn accuracy(&self, dataset: &TaskDataset, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let hits = indices
            .iter()
            .filter(|&&i| {
                let p = self.forward(&dataset.inputs[i]).expect("validated input");
                p.argmax() == dataset.gold_outputs[i].argmax()
            })
            .count();
        hits as f64 / indices.len() as f64
    }

    fn record_norm_ranges(&mut self, dataset: &TaskDataset, indices: &[usize]) {
        let l = self.n_layers();
        let mut ranges = vec![(f64::INFINITY, 0.0f64); l];
        for &i in indices {
            let (_, _, hs) = self.encode_raw(&dataset.inputs[i], l);
            for (r, h) in ranges.iter_mut().zip(&hs) {
                let n = math::norm(h);
                r.0 = r.0.min(n);
                r.1 = r.1.max(n);
            }
        }
        self.training_log.activation_norm_range = ranges;
    }

    /// Runs mini-batch SGD on the cross-entropy to the gold outputs over
    /// `sys_train`, updating only parameters in `scope`.
    pub fn train_stage(&mut self, dataset: &TaskDataset, hyper: &TrainHyper, scope: TrainScope) -> Result<()> {
        if hyper.batch_size == 0 || !hyper.lr.is_finite() || hyper.lr < 0.0 {
            return Err(Error::InvalidConfig("batch_size must be positive and lr finite, nonnegative".into()));
        }
        if dataset.output_labels.len() != self.config.output_labels.len() {
            return Err(Error::LabelMismatch {
                left: dataset.output_labels.len(),
                right: self.config.output_labels.len(),
            });
        }
        let train = dataset.split(crate::task::SplitName::SysTrain).to_vec();
        if train.is_empty() {
            return Err(Error::EmptySplit);
        }
        for &i in &train {
            self.check_input(&dataset.inputs[i])?;
        }
        let frozen = self.frozen_mask(scope);
        let mut r = rng::seeded(hyper.seed);
        let mut order = train.clone();
        let mut stage = TrainingStage {
            scope: match scope {
                TrainScope::All => "all".into(),
                TrainScope::Encoder => "encoder".into(),
            },
            hyper: Some(hyper.clone()),
            epochs: Vec::new(),
        };
        for epoch in 1..=hyper.epochs {
            rng::shuffle(&mut r, &mut order);
            for batch in order.chunks(hyper.batch_size) {
                let (loss, grad) = self.loss_and_gradient(dataset, batch);
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { epoch, loss });
                }
                optim::sgd_step(&mut self.params, &grad, hyper.lr, Some(&frozen));
            }
            let loss = self.mean_loss(dataset, &train);
            if !loss.is_finite() || self.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            stage.epochs.push(EpochRecord { epoch, train_loss: loss });
        }
        self.training_log.stages.push(stage);
        self.trained = true;
        self.record_norm_ranges(dataset, &train);
        Ok(())
    }
}

/// Initialises a system from `config` and trains all parameters.
pub fn train_system(dataset: &TaskDataset, config: SystemConfig, hyper: &TrainHyper) -> Result<System> {
    let mut sys = System::new(config)?;
    sys.train_stage(dataset, hyper, TrainScope::All)?;
    Ok(sys)
}

/// Task goodness of an output against the gold distribution:
/// negative cross-entropy, or 0/1 argmax accuracy (lowest index on ties).
pub fn goodness(output: &ProbDist, gold: &ProbDist, spec: Goodness) -> Result<f64> {
    if output.len() != gold.len() {
        return Err(Error::LabelMismatch {
            left: output.len(),
            right: gold.len(),
        });
    }
    Ok(match spec {
        Goodness::NegCrossEntropy => -cross_entropy_slice(gold.masses(), output.masses()),
        Goodness::Accuracy => (output.argmax() == gold.argmax()) as u8 as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, relative_error};
    use crate::task::{generate_agreement_task, AgreementConfig};

    fn small_dataset() -> TaskDataset {
        generate_agreement_task(
            &AgreementConfig {
                n_inputs: 200,
                vocab_size: 14,
                max_len: 9,
                n_distractors: 2,
                correlation: 0.0,
            },
            1,
        )
        .unwrap()
        .split_with([0.5, 0.2, 0.2, 0.1], 2)
        .unwrap()
    }

    fn config(arch: Arch, width: usize, nuisance: Option<NuisanceChannel>) -> SystemConfig {
        SystemConfig {
            arch,
            vocab_size: 14,
            max_len: 9,
            embed_dim: width,
            hidden: vec![width; 3],
            cut_layer: 2,
            output_labels: vec!["verb_sg".into(), "verb_pl".into()],
            seed: 4,
            nuisance,
        }
    }

    fn check_gradient(sys: &System, data: &TaskDataset) {
        let idx: Vec<usize> = (0..4).collect();
        let (_, analytic) = sys.loss_and_gradient(data, &idx);
        let f = |p: &[f64]| sys.with_parameters(p.to_vec()).unwrap().mean_loss(data, &idx);
        let x = RealVector::new(sys.parameters().to_vec()).unwrap();
        let numeric = finite_diff_gradient(f, &x, 1e-5).unwrap();
        let err = relative_error(&analytic, numeric.as_slice());
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let data = small_dataset();
        check_gradient(&System::new(config(Arch::Mlp, 6, None)).unwrap(), &data);
    }

    #[test]
    fn transformer_gradient_matches_finite_differences() {
        let data = small_dataset();
        check_gradient(&System::new(config(Arch::TinyTransformer, 6, None)).unwrap(), &data);
    }

    #[test]
    fn nuisance_gradient_matches_finite_differences() {
        let data = small_dataset();
        let n = NuisanceChannel {
            position: 1,
            dims: 2,
            scale: 1.0,
        };
        check_gradient(&System::new(config(Arch::Mlp, 6, Some(n))).unwrap(), &data);
    }

    #[test]
    fn decode_of_encode_is_forward() {
        let data = small_dataset();
        for arch in [Arch::Mlp, Arch::TinyTransformer] {
            let sys = System::new(config(arch, 6, None)).unwrap();
            for input in data.inputs.iter().take(100) {
                let full = sys.forward(input).unwrap();
                for layer in 1..=3 {
                    let h = sys.encode(input, layer).unwrap();
                    let out = sys.decode_vector(layer, h.as_slice()).unwrap();
                    assert_eq!(out, full);
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = small_dataset();
        let cfg = config(Arch::Mlp, 6, None);
        let before = System::new(cfg.clone()).unwrap();
        let after = train_system(
            &data,
            cfg,
            &TrainHyper {
                lr: 0.0,
                epochs: 2,
                batch_size: 8,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(before.parameters(), after.parameters());
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_dataset();
        let hyper = TrainHyper {
            lr: 0.1,
            epochs: 3,
            batch_size: 8,
            seed: 1,
        };
        let a = train_system(&data, config(Arch::TinyTransformer, 6, None), &hyper).unwrap();
        let b = train_system(&data, config(Arch::TinyTransformer, 6, None), &hyper).unwrap();
        assert_eq!(a, b);
        assert!(a.training_log.final_train_loss().is_some());
    }

    #[test]
    fn nuisance_channel_is_ignored_by_decoder() {
        let data = small_dataset();
        let n = NuisanceChannel {
            position: 1,
            dims: 2,
            scale: 1.0,
        };
        let sys = train_system(
            &data,
            config(Arch::Mlp, 6, Some(n)),
            &TrainHyper {
                lr: 0.2,
                epochs: 2,
                batch_size: 8,
                seed: 1,
            },
        )
        .unwrap();
        let h = sys.encode(&data.inputs[0], 2).unwrap();
        let mut moved = h.as_slice().to_vec();
        moved[4] += 3.0;
        moved[5] -= 2.0;
        assert_eq!(
            sys.decode_vector(2, h.as_slice()).unwrap(),
            sys.decode_vector(2, &moved).unwrap()
        );
    }

    #[test]
    fn layer_and_dimension_errors() {
        let data = small_dataset();
        let sys = System::new(config(Arch::Mlp, 6, None)).unwrap();
        assert!(matches!(
            sys.encode(&data.inputs[0], 4),
            Err(Error::LayerOutOfRange { .. })
        ));
        assert!(sys.encode(&data.inputs[0], 0).is_err());
        let bad = Activation {
            vector: RealVector::new(vec![0.0; 5]).unwrap(),
            input_id: 0,
            layer: 2,
        };
        assert!(matches!(sys.lens_readout(&bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn lens_at_last_layer_equals_output() {
        let data = small_dataset();
        let sys = System::new(config(Arch::Mlp, 6, None)).unwrap();
        let act = sys.encode_activation(&data, 3, 3).unwrap();
        assert_eq!(sys.lens_readout(&act).unwrap(), sys.forward(&data.inputs[3]).unwrap());
    }

    #[test]
    fn goodness_examples() {
        let gold = ProbDist::degenerate(2, 1);
        assert_eq!(goodness(&gold, &gold, Goodness::NegCrossEntropy).unwrap(), 0.0);
        assert_eq!(goodness(&gold, &gold, Goodness::Accuracy).unwrap(), 1.0);
        let u = ProbDist::uniform(2);
        assert!((goodness(&u, &gold, Goodness::NegCrossEntropy).unwrap() + 2f64.ln()).abs() < 1e-12);
        // Tie under argmax resolves to label 0.
        assert_eq!(goodness(&u, &gold, Goodness::Accuracy).unwrap(), 0.0);
        assert!(goodness(&ProbDist::uniform(3), &gold, Goodness::Accuracy).is_err());
    }
}
