use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::synth::Perturbation;
use crate::error::{Error, Result};
use crate::steering::{steer_layer, SteeringPlan, TriggerLog};
use crate::trace::{ActivationTrace, HeadId, ModelDims, TraceMeta};

pub type Token = u32;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub context: usize,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "layers, heads and head_dim must be positive ({} x {} x {})",
                self.layers, self.heads, self.head_dim
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary needs at least 2 tokens, got {}", self.vocab)));
        }
        if self.context < 2 {
            return Err(Error::InvalidArgument(format!("context limit {} too small", self.context)));
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            head_dim: 16,
            vocab: 64,
            context: 128,
            seed: 0,
        }
    }
}

/// Row-major `rows x cols` weight with `y = x W`.
#[derive(Debug, Clone, PartialEq)]
struct Linear {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
}

impl Linear {
    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Self {
        let w = (0..rows * cols)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Self { rows, cols, w }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &xv) in x.iter().enumerate() {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    w_in: Linear,
    w_out: Linear,
}

/// Small pre-norm decoder-only transformer with seeded random weights.
///
/// Each layer is `x += W_O(attn(LN(x)))` followed by `x += W_2 gelu(W_1 LN(x))`.
/// Layer norms have unit gain and zero bias. The concatenated per-head
/// attention outputs are exposed right before `W_O`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    config: DecoderConfig,
    token_embedding: Vec<f64>,
    position_embedding: Vec<f64>,
    blocks: Vec<Block>,
    unembedding: Linear,
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }
}

fn layer_norm(x: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn init_decoder(config: DecoderConfig) -> Result<ToyDecoder> {
    ToyDecoder::new(config)
}

impl ToyDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let hidden = 4 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        };
        let token_embedding = normal(&mut rng, config.vocab * d, 1.0);
        let position_embedding = normal(&mut rng, config.context * d, 0.5);
        let proj = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: Linear::gaussian(&mut rng, d, d, proj),
                wk: Linear::gaussian(&mut rng, d, d, proj),
                wv: Linear::gaussian(&mut rng, d, d, proj),
                wo: Linear::gaussian(&mut rng, d, d, proj),
                w_in: Linear::gaussian(&mut rng, d, hidden, proj),
                w_out: Linear::gaussian(&mut rng, hidden, d, 1.0 / (hidden as f64).sqrt()),
            })
            .collect();
        let unembedding = Linear::gaussian(&mut rng, d, config.vocab, proj);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            unembedding,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn all_heads(&self) -> Vec<HeadId> {
        self.config.dims().all_heads()
    }

    /// Runs one position through the stack. `hook` sees each layer's
    /// concatenated head outputs before `W_O` and may rewrite them.
    fn forward(
        &self,
        token: Token,
        pos: usize,
        cache: &mut KvCache,
        hook: &mut dyn FnMut(usize, &mut [f64]),
        mut attention: Option<&mut Vec<Vec<f64>>>,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.d_model();
        let dh = cfg.head_dim;
        let t = token as usize;
        let mut x: Vec<f64> = self.token_embedding[t * d..(t + 1) * d]
            .iter()
            .zip(&self.position_embedding[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();

        let mut normed = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut heads = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut hidden = vec![0.0; 4 * d];
        let scale = 1.0 / (dh as f64).sqrt();
        let n_keys = pos + 1;

        for (layer, block) in self.blocks.iter().enumerate() {
            layer_norm(&x, &mut normed);
            block.wq.apply(&normed, &mut q);
            block.wk.apply(&normed, &mut k);
            block.wv.apply(&normed, &mut v);
            cache.keys[layer].extend_from_slice(&k);
            cache.values[layer].extend_from_slice(&v);
            let keys = &cache.keys[layer];
            let values = &cache.values[layer];

            let mut mean_weights = attention.as_ref().map(|_| vec![0.0; n_keys]);
            let mut weights = vec![0.0; n_keys];
            for h in 0..cfg.heads {
                let qh = &q[h * dh..(h + 1) * dh];
                for (j, w) in weights.iter_mut().enumerate() {
                    let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    *w = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for w in weights.iter_mut() {
                    *w = (*w - max).exp();
                    total += *w;
                }
                weights.iter_mut().for_each(|w| *w /= total);
                if let Some(mw) = mean_weights.as_mut() {
                    for (m, w) in mw.iter_mut().zip(&weights) {
                        *m += w / cfg.heads as f64;
                    }
                }
                let out = &mut heads[h * dh..(h + 1) * dh];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, &w) in weights.iter().enumerate() {
                    let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &val) in out.iter_mut().zip(vh) {
                        *o += w * val;
                    }
                }
            }
            if let (Some(store), Some(mw)) = (attention.as_deref_mut(), mean_weights) {
                store.push(mw);
            }

            hook(layer, &mut heads);

            block.wo.apply(&heads, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            layer_norm(&x, &mut normed);
            block.w_in.apply(&normed, &mut hidden);
            hidden.iter_mut().for_each(|h| *h = gelu(*h));
            block.w_out.apply(&hidden, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }

        layer_norm(&x, &mut normed);
        let mut logits = vec![0.0; cfg.vocab];
        self.unembedding.apply(&normed, &mut logits);
        logits
    }
}

/// Everything the decode loop may do at the hook point.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeOptions<'a> {
    pub plan: Option<&'a SteeringPlan>,
    pub perturbation: Option<&'a Perturbation>,
    pub capture_attention: bool,
}

impl<'a> DecodeOptions<'a> {
    pub fn with_plan(plan: &'a SteeringPlan) -> Self {
        Self {
            plan: Some(plan),
            ..Self::default()
        }
    }
}

/// Head outputs as they entered `W_O`, for every head, `[step][head][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecording {
    pub heads: Arc<[HeadId]>,
    pub head_dim: usize,
    pub steps: usize,
    pub values: Vec<f64>,
}

impl HeadRecording {
    pub fn activation(&self, step: usize, slot: usize) -> &[f64] {
        let start = (step * self.heads.len() + slot) * self.head_dim;
        &self.values[start..start + self.head_dim]
    }

    pub fn head_rows(&self, head: HeadId) -> Result<Vec<&[f64]>> {
        let slot = self.heads.iter().position(|&h| h == head).ok_or(Error::UnknownHead(head))?;
        Ok((0..self.steps).map(|t| self.activation(t, slot)).collect())
    }

    /// Narrows to `f32` and attaches trace metadata.
    pub fn to_trace(&self, problem_id: &str, trace_id: &str, label: crate::trace::Label) -> Result<ActivationTrace> {
        let meta = TraceMeta {
            problem_id: problem_id.to_owned(),
            trace_id: trace_id.to_owned(),
            label,
            length: self.steps,
        };
        ActivationTrace::new(
            meta,
            self.heads.clone(),
            self.head_dim,
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Generated (or forced) tokens, one per step.
    pub tokens: Vec<Token>,
    pub activations: HeadRecording,
    pub trigger_log: TriggerLog,
    /// Next-token logits produced at each step.
    pub logits: Vec<Vec<f64>>,
    /// Head-averaged attention rows, `[step][layer][key position]`, when captured.
    pub attention: Option<Vec<Vec<Vec<f64>>>>,
}

enum Continuation<'a> {
    Greedy(usize),
    Forced(&'a [Token]),
}

fn argmax(logits: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as Token
}

impl ToyDecoder {
    fn check_request(&self, prompt: &[Token], steps: usize, opts: &DecodeOptions<'_>) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary")));
        }
        let needed = prompt.len() + steps;
        if needed > self.config.context {
            return Err(Error::ContextOverflow {
                needed,
                limit: self.config.context,
            });
        }
        let dims = self.config.dims();
        if let Some(plan) = opts.plan {
            for (_, unit) in plan.units() {
                if !dims.contains(unit.head()) {
                    return Err(Error::UnknownHead(unit.head()));
                }
                if unit.manifold().head_dim() != self.config.head_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.config.head_dim,
                        found: unit.manifold().head_dim(),
                    });
                }
            }
        }
        if let Some(p) = opts.perturbation {
            p.validate(&dims, steps)?;
        }
        Ok(())
    }

    fn run(&self, prompt: &[Token], cont: Continuation<'_>, opts: DecodeOptions<'_>) -> Result<DecodeResult> {
        let steps = match cont {
            Continuation::Greedy(n) => n,
            Continuation::Forced(f) => f.len(),
        };
        self.check_request(prompt, steps, &opts)?;
        if let Continuation::Forced(f) = cont {
            if let Some(&bad) = f.iter().find(|&&t| t as usize >= self.config.vocab) {
                return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary")));
            }
        }

        let cfg = self.config;
        let heads: Arc<[HeadId]> = self.all_heads().into();
        let row = cfg.heads * cfg.head_dim;
        let mut cache = KvCache::new(cfg.layers);
        let mut noop = |_: usize, _: &mut [f64]| {};
        for (pos, &tok) in prompt[..prompt.len() - 1].iter().enumerate() {
            self.forward(tok, pos, &mut cache, &mut noop, None);
        }

        let mut noise = opts.perturbation.map(|p| p.noise_stream());
        let mut tokens = Vec::with_capacity(steps);
        let mut logits_out = Vec::with_capacity(steps);
        let mut values = vec![0.0; steps * cfg.layers * row];
        let mut log = Vec::new();
        let mut attention = opts.capture_attention.then(Vec::new);
        let mut current = *prompt.last().expect("non-empty prompt");

        for step in 0..steps {
            let pos = prompt.len() - 1 + step;
            let record = &mut values[step * cfg.layers * row..(step + 1) * cfg.layers * row];
            let mut hook = |layer: usize, z: &mut [f64]| {
                if let (Some(p), Some(stream)) = (opts.perturbation, noise.as_mut()) {
                    p.apply(stream, step, layer, cfg.head_dim, z);
                }
                if let Some(plan) = opts.plan {
                    steer_layer(plan, step, layer, cfg.head_dim, z, &mut log);
                }
                record[layer * row..(layer + 1) * row].copy_from_slice(z);
            };
            let mut rows = attention.as_ref().map(|_| Vec::with_capacity(cfg.layers));
            let logits = self.forward(current, pos, &mut cache, &mut hook, rows.as_mut());
            if let (Some(all), Some(rows)) = (attention.as_mut(), rows) {
                all.push(rows);
            }
            let next = match cont {
                Continuation::Greedy(_) => argmax(&logits),
                Continuation::Forced(f) => f[step],
            };
            tokens.push(next);
            logits_out.push(logits);
            current = next;
        }

        Ok(DecodeResult {
            tokens,
            activations: HeadRecording {
                heads,
                head_dim: cfg.head_dim,
                steps,
                values,
            },
            trigger_log: TriggerLog { records: log },
            logits: logits_out,
            attention,
        })
    }
}

/// Greedy decoding for `max_steps` tokens with optional hook-point steering
/// and perturbation. Step `t` processes the token at position
/// `prompt.len() - 1 + t` and emits the next one.
pub fn decode_greedy(model: &ToyDecoder, prompt: &[Token], max_steps: usize, opts: DecodeOptions<'_>) -> Result<DecodeResult> {
    model.run(prompt, Continuation::Greedy(max_steps), opts)
}

/// Like [`decode_greedy`] but the emitted tokens are fixed to `forced`.
pub fn decode_forced(model: &ToyDecoder, prompt: &[Token], forced: &[Token], opts: DecodeOptions<'_>) -> Result<DecodeResult> {
    model.run(prompt, Continuation::Forced(forced), opts)
}
