//! 2-D residual encoder with spectral and temporal graph-attention branches,
//! top-k graph pooling and multiplicative fusion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, FrontendKind, MaxPoolAxis, PcenInit};
use crate::nn::{self, Ctx, ParamStore};

pub const PREFIX: &str = "rawgat";
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub spectral: bool,
    pub temporal: bool,
    /// Combine the branches by multiplication; addition when off.
    pub fusion: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            spectral: true,
            temporal: true,
            fusion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGatConfig {
    pub frontend: FrontendConfig,
    pub input_len: usize,
    /// Output channels of the six 2-D residual blocks.
    pub block_widths: Vec<usize>,
    pub gat_dim: usize,
    pub head_dim: usize,
    pub proj_nodes: usize,
    pub spectral_ratio: f64,
    pub temporal_ratio: f64,
    pub head_ratio: f64,
    pub dropout: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for RawGatConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig {
                kind: FrontendKind::GaborPcen,
                filters: 70,
                kernel_len: 128,
                sample_rate: 16000.0,
                stride: 3,
                gaussian_pool: true,
                max_pool: MaxPoolAxis::Filters,
                pcen: PcenInit::default(),
            },
            input_len: 64600,
            block_widths: vec![32, 32, 32, 64, 64, 64],
            gat_dim: 32,
            head_dim: 16,
            proj_nodes: 12,
            spectral_ratio: 0.64,
            temporal_ratio: 0.81,
            head_ratio: 0.64,
            dropout: 0.3,
            ablation: Ablation::default(),
        }
    }
}

/// Number of nodes kept by top-k pooling.
pub fn kept(ratio: f64, nodes: usize) -> usize {
    ((ratio * nodes as f64).floor() as usize).max(1)
}

/// Node counts through the graph part of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Nodes {
    spectral: usize,
    temporal: usize,
    spectral_kept: usize,
    temporal_kept: usize,
    head_kept: usize,
}

impl RawGatConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        if self.block_widths.len() != 6 || self.block_widths.contains(&0) {
            return Err(Error::Config(
                "rawgat needs six positive block widths".into(),
            ));
        }
        if self.gat_dim == 0 || self.head_dim == 0 || self.proj_nodes == 0 {
            return Err(Error::Config("rawgat layer sizes must be positive".into()));
        }
        for r in [self.spectral_ratio, self.temporal_ratio, self.head_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("top-k ratio {r} outside (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !self.ablation.spectral && !self.ablation.temporal {
            return Err(Error::Config(
                "at least one graph branch must be enabled".into(),
            ));
        }
        self.nodes()?;
        Ok(())
    }

    /// `(freq, time)` extents of the encoder output.
    fn encoder_extent(&self) -> Result<(usize, usize)> {
        let (f, mut t) = self.frontend.output_shape(self.input_len)?;
        for _ in &self.block_widths {
            t /= 3;
        }
        if t == 0 {
            return Err(Error::Config(format!(
                "input of {} samples is too short for six pooling stages",
                self.input_len
            )));
        }
        Ok((f, t))
    }

    fn nodes(&self) -> Result<Nodes> {
        let (f, t) = self.encoder_extent()?;
        Ok(Nodes {
            spectral: f,
            temporal: t,
            spectral_kept: kept(self.spectral_ratio, f),
            temporal_kept: kept(self.temporal_ratio, t),
            head_kept: kept(self.head_ratio, self.proj_nodes),
        })
    }
}

fn p(name: &str) -> String {
    format!("{PREFIX}.{name}")
}

fn init_gat(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    nn::init_linear(store, rng, &format!("{prefix}.proj"), fan_in, fan_out);
    let bound = 1.0 / (fan_out as f64).sqrt();
    store.insert(
        format!("{prefix}.att_l"),
        nn::uniform(rng, &[fan_out, 1], bound),
        true,
    );
    store.insert(
        format!("{prefix}.att_r"),
        nn::uniform(rng, &[fan_out, 1], bound),
        true,
    );
}

pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RawGatConfig) -> Result<()> {
    cfg.validate()?;
    frontend::init(store, &cfg.frontend)?;
    let mut c_in = 1;
    for (i, &c) in cfg.block_widths.iter().enumerate() {
        let b = p(&format!("block{i}"));
        if i > 0 {
            nn::init_batch_norm(store, &format!("{b}.bn_in"), c_in);
        }
        nn::init_conv(store, rng, &format!("{b}.conv1"), &[c, c_in, 2, 3], true);
        nn::init_batch_norm(store, &format!("{b}.bn1"), c);
        nn::init_conv(store, rng, &format!("{b}.conv2"), &[c, c, 2, 3], true);
        if c != c_in {
            nn::init_conv(store, rng, &format!("{b}.skip"), &[c, c_in, 1, 1], true);
        }
        c_in = c;
    }
    let n = cfg.nodes()?;
    for (on, branch, kept) in [
        (cfg.ablation.spectral, "spectral", n.spectral_kept),
        (cfg.ablation.temporal, "temporal", n.temporal_kept),
    ] {
        if on {
            init_gat(store, rng, &p(&format!("{branch}.gat")), c_in, cfg.gat_dim);
            nn::init_linear(store, rng, &p(&format!("{branch}.pool")), cfg.gat_dim, 1);
            nn::init_linear(
                store,
                rng,
                &p(&format!("{branch}.proj")),
                kept,
                cfg.proj_nodes,
            );
        }
    }
    init_gat(store, rng, &p("head.gat"), cfg.gat_dim, cfg.head_dim);
    nn::init_linear(store, rng, &p("head.pool"), cfg.head_dim, 1);
    nn::init_linear(store, rng, &p("head.node_fc"), cfg.head_dim, 1);
    nn::init_linear(store, rng, &p("head.out"), n.head_kept, 2);
    Ok(())
}

fn residual_block(ctx: &mut Ctx, i: usize, x: Var) -> Result<Var> {
    let b = p(&format!("block{i}"));
    let mut h = x;
    if i > 0 {
        h = nn::batch_norm(ctx, &format!("{b}.bn_in"), h)?;
        h = ctx.tape.selu(h)?;
    }
    h = nn::conv2d(ctx, &format!("{b}.conv1"), h, (1, 1))?;
    h = nn::batch_norm(ctx, &format!("{b}.bn1"), h)?;
    h = ctx.tape.selu(h)?;
    h = nn::conv2d(ctx, &format!("{b}.conv2"), h, (0, 1))?;
    let identity = if ctx.store().get(&format!("{b}.skip.weight")).is_some() {
        nn::conv2d(ctx, &format!("{b}.skip"), x, (0, 0))?
    } else {
        x
    };
    h = ctx.tape.add(h, identity)?;
    nn::max_pool(ctx, h, 3, 3, 3)
}

/// Multiplies the last axis of `x` by a `(F, G)` matrix.
fn last_axis_matmul(ctx: &mut Ctx, x: Var, w: Var) -> Result<Var> {
    let shape = ctx.shape(x).to_vec();
    let f = *shape.last().unwrap();
    let g = ctx.shape(w)[1];
    let rows = shape.iter().product::<usize>() / f;
    let x2 = ctx.tape.reshape(x, &[rows, f])?;
    let y = ctx.tape.matmul(x2, w)?;
    let mut out = shape;
    *out.last_mut().unwrap() = g;
    ctx.tape.reshape(y, &out)
}

/// Graph attention over a complete graph on `x: (B, N, F)`.
///
/// Returns the updated nodes `(B, N, F')` and the attention matrix `(B, N, N)`.
pub fn gat_layer_with_attention(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<(Var, Var)> {
    let wh = nn::linear(ctx, &format!("{prefix}.proj"), x)?;
    let shape = ctx.shape(wh).to_vec();
    let (b, n) = (shape[0], shape[1]);
    let al = ctx.param(&format!("{prefix}.att_l"))?;
    let ar = ctx.param(&format!("{prefix}.att_r"))?;
    let sl = last_axis_matmul(ctx, wh, al)?;
    let sr = last_axis_matmul(ctx, wh, ar)?;
    let sl = ctx.tape.broadcast_to(sl, &[b, n, n])?;
    let sr = ctx.tape.reshape(sr, &[b, 1, n])?;
    let sr = ctx.tape.broadcast_to(sr, &[b, n, n])?;
    let e = ctx.tape.add(sl, sr)?;
    let e = ctx.tape.leaky_relu(e, ATTENTION_SLOPE)?;
    let att = ctx.tape.softmax(e)?;
    let agg = ctx.tape.matmul(att, wh)?;
    let out = ctx.tape.selu(agg)?;
    Ok((out, att))
}

pub fn gat_layer(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    Ok(gat_layer_with_attention(ctx, prefix, x)?.0)
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

/// Gates nodes of `x: (B, N, F)` with `sigmoid(FC(x))`, scales them and keeps
/// the `floor(ratio * N)` highest-gated nodes in their original order.
pub fn top_k_pool(ctx: &mut Ctx, prefix: &str, x: Var, ratio: f64) -> Result<Var> {
    let shape = ctx.shape(x).to_vec();
    let (b, n) = (shape[0], shape[1]);
    let y = nn::linear(ctx, prefix, x)?;
    let y = ctx.tape.sigmoid(y)?;
    let scores = ctx.value(y).data().to_vec();
    let yb = ctx.tape.broadcast_to(y, &shape)?;
    let scaled = ctx.tape.mul(x, yb)?;
    let k = kept(ratio, n);
    let idx = (0..b)
        .map(|i| top_k_indices(&scores[i * n..(i + 1) * n], k))
        .collect();
    ctx.tape.gather_rows(scaled, idx)
}

/// Projects the node axis of `x: (B, N, F)` to `proj_nodes`, giving `(B, F, P)`.
fn project_nodes(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let xt = ctx.tape.permute(x, &[0, 2, 1])?;
    nn::linear(ctx, prefix, xt)
}

/// Elementwise product of two projected node sets.
pub fn fuse(ctx: &mut Ctx, a: Var, b: Var) -> Result<Var> {
    if ctx.shape(a) != ctx.shape(b) {
        return Err(Error::contract(format!(
            "fusion operands differ: {:?} vs {:?}",
            ctx.shape(a),
            ctx.shape(b)
        )));
    }
    ctx.tape.mul(a, b)
}

fn trace_nodes(ctx: &mut Ctx, label: &str, x: Var) {
    // Recorded as (features, nodes).
    let s = ctx.shape(x);
    let shape = vec![s[2], s[1]];
    ctx.trace_shape(label, shape);
}

fn branch(ctx: &mut Ctx, cfg: &RawGatConfig, name: &str, enc: Var) -> Result<Var> {
    let (axis, ratio) = if name == "spectral" {
        (3, cfg.spectral_ratio)
    } else {
        (2, cfg.temporal_ratio)
    };
    let pooled = ctx.tape.max_axis(enc, axis)?;
    let nodes = ctx.tape.permute(pooled, &[0, 2, 1])?;
    trace_nodes(ctx, &format!("{name}_nodes"), nodes);
    let g = gat_layer(ctx, &p(&format!("{name}.gat")), nodes)?;
    trace_nodes(ctx, &format!("{name}_gat"), g);
    let k = top_k_pool(ctx, &p(&format!("{name}.pool")), g, ratio)?;
    trace_nodes(ctx, &format!("{name}_topk"), k);
    let proj = project_nodes(ctx, &p(&format!("{name}.proj")), k)?;
    ctx.trace(&format!("{name}_proj"), proj);
    Ok(proj)
}

/// Log-probabilities `(B, 2)` over (spoof, bonafide) for `wave: (B, input_len)`.
pub fn forward(ctx: &mut Ctx, cfg: &RawGatConfig, wave: Var) -> Result<Var> {
    let len = ctx.shape(wave)[1];
    if len != cfg.input_len {
        return Err(Error::arg(format!(
            "rawgat expects {} samples, got {len}",
            cfg.input_len
        )));
    }
    let fe = frontend::forward(ctx, &cfg.frontend, wave)?;
    let s = ctx.shape(fe.output).to_vec();
    let mut x = ctx.tape.reshape(fe.output, &[s[0], 1, s[1], s[2]])?;
    for i in 0..cfg.block_widths.len() {
        x = residual_block(ctx, i, x)?;
        match i {
            2 => ctx.trace("stack1", x),
            5 => ctx.trace("stack2", x),
            _ => {}
        }
    }

    let spectral = if cfg.ablation.spectral {
        Some(branch(ctx, cfg, "spectral", x)?)
    } else {
        None
    };
    let temporal = if cfg.ablation.temporal {
        Some(branch(ctx, cfg, "temporal", x)?)
    } else {
        None
    };
    let fused = match (spectral, temporal) {
        (Some(a), Some(b)) if cfg.ablation.fusion => fuse(ctx, a, b)?,
        (Some(a), Some(b)) => ctx.tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("validated config enables a branch"),
    };
    ctx.trace("fusion", fused);

    let nodes = ctx.tape.permute(fused, &[0, 2, 1])?;
    let g = gat_layer(ctx, &p("head.gat"), nodes)?;
    trace_nodes(ctx, "head_gat", g);
    let k = top_k_pool(ctx, &p("head.pool"), g, cfg.head_ratio)?;
    let k = nn::dropout(ctx, k, cfg.dropout)?;
    trace_nodes(ctx, "head_topk", k);
    let per_node = nn::linear(ctx, &p("head.node_fc"), k)?;
    trace_nodes(ctx, "head_proj", per_node);
    let b = ctx.shape(per_node)[0];
    let n = ctx.shape(per_node)[1];
    let flat = ctx.tape.reshape(per_node, &[b, n])?;
    let logits = nn::linear(ctx, &p("head.out"), flat)?;
    let out = ctx.tape.log_softmax(logits)?;
    ctx.trace("output", out);
    Ok(out)
}

/// Shapes (without batch axis) that [`forward`] records, derived from the
/// configuration alone. Node sets are listed as `(features, nodes)`.
pub fn shape_plan(cfg: &RawGatConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let (f, t0) = cfg.frontend.output_shape(cfg.input_len)?;
    let n = cfg.nodes()?;
    let mut plan = vec![
        (
            "filterbank".to_string(),
            vec![
                cfg.frontend.filters,
                cfg.input_len - cfg.frontend.taps() + 1,
            ],
        ),
        ("pooled".to_string(), vec![cfg.frontend.filters, t0]),
        ("frontend".to_string(), vec![f, t0]),
    ];
    let mut t = t0;
    for (i, &w) in cfg.block_widths.iter().enumerate() {
        t /= 3;
        match i {
            2 => plan.push(("stack1".into(), vec![w, f, t])),
            5 => plan.push(("stack2".into(), vec![w, f, t])),
            _ => {}
        }
    }
    let c = *cfg.block_widths.last().unwrap();
    for (on, name, nodes, kept) in [
        (
            cfg.ablation.spectral,
            "spectral",
            n.spectral,
            n.spectral_kept,
        ),
        (
            cfg.ablation.temporal,
            "temporal",
            n.temporal,
            n.temporal_kept,
        ),
    ] {
        if on {
            plan.push((format!("{name}_nodes"), vec![c, nodes]));
            plan.push((format!("{name}_gat"), vec![cfg.gat_dim, nodes]));
            plan.push((format!("{name}_topk"), vec![cfg.gat_dim, kept]));
            plan.push((format!("{name}_proj"), vec![cfg.gat_dim, cfg.proj_nodes]));
        }
    }
    plan.push(("fusion".into(), vec![cfg.gat_dim, cfg.proj_nodes]));
    plan.push(("head_gat".into(), vec![cfg.head_dim, cfg.proj_nodes]));
    plan.push(("head_topk".into(), vec![cfg.head_dim, n.head_kept]));
    plan.push(("head_proj".into(), vec![1, n.head_kept]));
    plan.push(("output".into(), vec![2]));
    Ok(plan)
}
