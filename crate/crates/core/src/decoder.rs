//! Query-decompose decoder: instance queries are split into per-frame box
//! queries, refined on their own frame and aggregated back over time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deformattn::{AttnTrace, DeformAttn, DeformAttnConfig, FrameMode};
use crate::encoder::EncodedVideo;
use crate::heads::BoxHead;
use crate::tensor::{Array, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamId, ParamStore, Tape, Var};

/// How box queries are combined into the instance query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain sum over frames.
    Sum,
    /// Mean over frames.
    Average,
    /// Softmax over frames of a learned scalar per box query.
    WeightedSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub queries: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub points: usize,
    pub aggregation: Aggregation,
    /// Per-frame box queries persist across layers; when off, the shared
    /// instance query is the attention query on every layer.
    pub decompose: bool,
    /// Stop gradients through the reference boxes passed between layers.
    pub detach_refs: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            queries: 20,
            dim: 64,
            ffn_dim: 128,
            heads: 8,
            points: 4,
            aggregation: Aggregation::WeightedSum,
            decompose: true,
            detach_refs: true,
        }
    }
}

/// Multi-head attention among the `N` instance queries.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), dim, dim, ParamGroup::Default, rng);
        Self {
            heads,
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            out: lin("out"),
        }
    }

    /// `x [N, C]`, queries and keys get `pos` added.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, pos: Var<'t>) -> Var<'t> {
        let (n, c) = (x.dim(0), x.dim(1));
        let hd = c / self.heads;
        let qk_in = x + pos;
        let split = |v: Var<'t>| v.reshape(&[n, self.heads, hd]).permute(&[1, 0, 2]);
        let q = split(self.q.forward(tape, store, qk_in));
        let k = split(self.k.forward(tape, store, qk_in)).permute(&[0, 2, 1]);
        let v = split(self.v.forward(tape, store, x));
        let att = q.bmm(k).scale(1.0 / (hd as f64).sqrt()).softmax();
        let y = att.bmm(v).permute(&[1, 0, 2]).reshape(&[n, c]);
        self.out.forward(tape, store, y)
    }
}

struct DecoderLayer {
    sa_norm: LayerNorm,
    sa: SelfAttention,
    ca_norm: LayerNorm,
    ca: DeformAttn,
    ffn_norm: LayerNorm,
    ffn: Mlp,
    frame_weight: Linear,
}

/// State after one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerOutput<'t> {
    /// Normalized instance embeddings `[N, C]`.
    pub instances: Var<'t>,
    /// Normalized box queries `[T, N, C]`.
    pub box_queries: Var<'t>,
    /// Reference boxes this layer attended with `[T, N, 4]`.
    pub refs: Var<'t>,
    /// Refined boxes `[T, N, 4]`.
    pub boxes: Var<'t>,
    /// Aggregation weights `[N, T]`.
    pub frame_weights: Var<'t>,
    pub attention: AttnTrace,
}

pub struct Decoder {
    pub config: DecoderConfig,
    pub query_embed: ParamId,
    pub query_pos: ParamId,
    pub ref_logits: ParamId,
    layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, levels: usize, rng: &mut impl Rng) -> Self {
        let (n, c) = (config.queries, config.dim);
        let query_embed = store.add("query_embed", &[n, c], Init::Normal(1.0), ParamGroup::Default, rng);
        let query_pos = store.add("query_pos", &[n, c], Init::Normal(1.0), ParamGroup::Default, rng);
        let ref_logits = store.add("query_ref", &[n, 4], Init::Uniform(-1.5, 1.5), ParamGroup::Default, rng);
        let attn_cfg = DeformAttnConfig {
            dim: c,
            heads: config.heads,
            levels,
            points: config.points,
        };
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    sa_norm: LayerNorm::new(store, &format!("{p}.sa_norm"), c, rng),
                    sa: SelfAttention::new(store, &format!("{p}.self_attn"), c, config.heads, rng),
                    ca_norm: LayerNorm::new(store, &format!("{p}.ca_norm"), c, rng),
                    ca: DeformAttn::new(store, &format!("{p}.cross_attn"), attn_cfg, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), c, rng),
                    ffn: Mlp::new(store, &format!("{p}.ffn"), c, config.ffn_dim, c, 2, rng),
                    frame_weight: Linear::new(store, &format!("{p}.frame_weight"), c, 1, ParamGroup::Default, rng),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(store, "decoder.out_norm", c, rng);
        Self {
            config,
            query_embed,
            query_pos,
            ref_logits,
            layers,
            out_norm,
        }
    }

    /// Scalar-per-frame weights `[N, T]` used to aggregate box queries `[T, N, C]`.
    pub fn frame_weights<'t>(&self, tape: &'t Tape, store: &ParamStore, layer: usize, box_queries: Var<'t>) -> Var<'t> {
        let (t, n) = (box_queries.dim(0), box_queries.dim(1));
        match self.config.aggregation {
            Aggregation::WeightedSum => self.layers[layer]
                .frame_weight
                .forward(tape, store, box_queries)
                .reshape(&[t, n])
                .transpose(0, 1)
                .softmax(),
            Aggregation::Average => tape.constant(Array::full(&[n, t], 1.0 / t as f64)),
            Aggregation::Sum => tape.constant(Array::ones(&[n, t])),
        }
    }

    /// `Σ_t w[n, t] · B[t, n] + residual[n]`.
    pub fn aggregate<'t>(weights: Var<'t>, box_queries: Var<'t>, residual: Var<'t>) -> Var<'t> {
        let (t, n) = (box_queries.dim(0), box_queries.dim(1));
        (weights.transpose(0, 1).reshape(&[t, n, 1]) * box_queries).sum_axis(0, false) + residual
    }

    /// Runs every layer over the encoded frames. Box refinement uses the
    /// shared `box_head`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        encoded: &EncodedVideo<'t>,
        box_head: &BoxHead,
        mode: FrameMode,
    ) -> Vec<LayerOutput<'t>> {
        let cfg = &self.config;
        let t = encoded.frames();
        let (n, c) = (cfg.queries, cfg.dim);
        let pos = tape.param(store, self.query_pos);
        let mut instance = tape.param(store, self.query_embed);
        let mut refs = tape
            .param(store, self.ref_logits)
            .sigmoid()
            .reshape(&[1, n, 4])
            .expand(&[t, n, 4]);
        let mut box_queries: Option<Var<'t>> = None;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let instance_sa = instance
                + layer
                    .sa
                    .forward(tape, store, layer.sa_norm.forward(tape, store, instance), pos);
            let query_in = match box_queries {
                Some(b) if cfg.decompose => b,
                _ => instance_sa.reshape(&[1, n, c]).expand(&[t, n, c]),
            };
            let values = layer.ca.project_values(tape, store, encoded.memory);
            let q = layer.ca_norm.forward(tape, store, query_in) + pos;
            let (attended, attention) = layer.ca.forward(tape, store, q, refs, values, &encoded.levels, mode);
            let mut b = query_in + attended;
            b = b + layer.ffn.forward(tape, store, layer.ffn_norm.forward(tape, store, b));
            let weights = self.frame_weights(tape, store, li, b);
            instance = Self::aggregate(weights, b, instance_sa);
            let box_normed = self.out_norm.forward(tape, store, b);
            let boxes = box_head.forward(tape, store, box_normed, refs);
            outputs.push(LayerOutput {
                instances: self.out_norm.forward(tape, store, instance),
                box_queries: box_normed,
                refs,
                boxes,
                frame_weights: weights,
                attention,
            });
            let next = if cfg.detach_refs { boxes.detach() } else { boxes };
            refs = if cfg.decompose {
                next
            } else {
                next.mean_axis(0, true).expand(&[t, n, 4])
            };
            box_queries = Some(b);
        }
        outputs
    }
}

/// Sampling points and aggregation weights of one decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    /// `[frame][query][head]` lists of normalized `(x, y)` sampling points.
    pub sampling_points: Vec<Vec<Vec<Vec<[f64; 2]>>>>,
    /// `[frame][query][head]` attention weight of each sampling point.
    pub sampling_weights: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[query][frame]` aggregation weights.
    pub frame_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    pub frames: usize,
    pub queries: usize,
    pub layers: Vec<LayerDiagnostics>,
}

/// Collects sampling points and frame weights from a completed forward pass.
pub fn export_attention_diagnostics(outputs: &[LayerOutput<'_>]) -> AttentionDiagnostics {
    let mut layers = Vec::new();
    let (mut frames, mut queries) = (0, 0);
    for (li, out) in outputs.iter().enumerate() {
        let loc = &out.attention.locations;
        let att = &out.attention.weights;
        let s = loc.shape();
        let (t, n, heads, p) = (s[0], s[1], s[2], s[3]);
        frames = t;
        queries = n;
        let mut points = vec![vec![vec![Vec::with_capacity(p); heads]; n]; t];
        let mut weights = vec![vec![vec![Vec::with_capacity(p); heads]; n]; t];
        for ti in 0..t {
            for ni in 0..n {
                for h in 0..heads {
                    for pi in 0..p {
                        let idx = ((ti * n + ni) * heads + h) * p + pi;
                        points[ti][ni][h].push([loc.data()[idx * 2], loc.data()[idx * 2 + 1]]);
                        weights[ti][ni][h].push(att.data()[idx]);
                    }
                }
            }
        }
        let fw = out.frame_weights.value();
        layers.push(LayerDiagnostics {
            layer: li,
            sampling_points: points,
            sampling_weights: weights,
            frame_weights: fw.data().chunks(t).map(|r| r.to_vec()).collect(),
        });
    }
    AttentionDiagnostics {
        frames,
        queries,
        layers,
    }
}
