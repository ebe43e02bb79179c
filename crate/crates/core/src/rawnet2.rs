//! 1-D residual backbone with feature-map scaling and GRU aggregation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, FrontendKind, MaxPoolAxis, PcenInit};
use crate::nn::{self, Ctx, ParamStore};

pub const PREFIX: &str = "rawnet2";
pub const LEAKY_SLOPE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNet2Config {
    pub frontend: FrontendConfig,
    pub input_len: usize,
    /// Output channels of the six residual blocks.
    pub block_widths: Vec<usize>,
    pub gru_hidden: usize,
    pub fc_hidden: usize,
}

impl Default for RawNet2Config {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig {
                kind: FrontendKind::GaborPcen,
                filters: 20,
                kernel_len: 1024,
                sample_rate: 16000.0,
                stride: 3,
                gaussian_pool: true,
                max_pool: MaxPoolAxis::Time,
                pcen: PcenInit::default(),
            },
            input_len: 64600,
            block_widths: vec![20, 20, 128, 128, 128, 128],
            gru_hidden: 1024,
            fc_hidden: 1024,
        }
    }
}

impl RawNet2Config {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        if self.frontend.max_pool != MaxPoolAxis::Time {
            return Err(Error::Config(
                "rawnet2 pools its frontend along time".into(),
            ));
        }
        if self.block_widths.len() != 6 || self.block_widths.contains(&0) {
            return Err(Error::Config(
                "rawnet2 needs six positive block widths".into(),
            ));
        }
        if self.gru_hidden == 0 || self.fc_hidden == 0 {
            return Err(Error::Config(
                "rawnet2 GRU and FC sizes must be positive".into(),
            ));
        }
        let plan = shape_plan(self)?;
        if plan.iter().any(|(_, s)| s.contains(&0)) {
            return Err(Error::Config(format!(
                "input of {} samples is too short for six pooling stages",
                self.input_len
            )));
        }
        Ok(())
    }
}

fn block_prefix(i: usize) -> String {
    format!("{PREFIX}.block{i}")
}

pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RawNet2Config) -> Result<()> {
    cfg.validate()?;
    frontend::init(store, &cfg.frontend)?;
    let mut c_in = cfg.frontend.out_channels();
    for (i, &c) in cfg.block_widths.iter().enumerate() {
        let p = block_prefix(i);
        if i > 0 {
            nn::init_batch_norm(store, &format!("{p}.bn_in"), c_in);
        }
        nn::init_conv(store, rng, &format!("{p}.conv1"), &[c, c_in, 3], true);
        nn::init_batch_norm(store, &format!("{p}.bn1"), c);
        nn::init_conv(store, rng, &format!("{p}.conv2"), &[c, c, 3], true);
        if c != c_in {
            nn::init_conv(store, rng, &format!("{p}.skip"), &[c, c_in, 1], true);
        }
        nn::init_linear(store, rng, &format!("{p}.fms"), c, c);
        c_in = c;
    }
    nn::init_batch_norm(store, &format!("{PREFIX}.bn_gru"), c_in);
    nn::init_gru(store, rng, &format!("{PREFIX}.gru"), c_in, cfg.gru_hidden);
    nn::init_linear(
        store,
        rng,
        &format!("{PREFIX}.fc1"),
        cfg.gru_hidden,
        cfg.fc_hidden,
    );
    nn::init_linear(store, rng, &format!("{PREFIX}.fc2"), cfg.fc_hidden, 2);
    Ok(())
}

/// Feature-map scaling `c * r + r` with `r = sigmoid(FC(mean_t c))`, on
/// `x: (B, C, T)`.
pub fn fms(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let shape = ctx.shape(x).to_vec();
    let avg = ctx.tape.mean_axis(x, 2)?;
    let r = nn::linear(ctx, prefix, avg)?;
    let r = ctx.tape.sigmoid(r)?;
    let r = ctx.tape.reshape(r, &[shape[0], shape[1], 1])?;
    let r = ctx.tape.broadcast_to(r, &shape)?;
    let cr = ctx.tape.mul(x, r)?;
    ctx.tape.add(cr, r)
}

fn residual_block(ctx: &mut Ctx, i: usize, x: Var, skip: bool) -> Result<Var> {
    let p = block_prefix(i);
    let mut h = x;
    if i > 0 {
        h = nn::batch_norm(ctx, &format!("{p}.bn_in"), h)?;
        h = ctx.tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    h = nn::conv1d(ctx, &format!("{p}.conv1"), h, 1, (1, 1), 1)?;
    h = nn::batch_norm(ctx, &format!("{p}.bn1"), h)?;
    h = ctx.tape.leaky_relu(h, LEAKY_SLOPE)?;
    h = nn::conv1d(ctx, &format!("{p}.conv2"), h, 1, (1, 1), 1)?;
    if skip {
        let identity = if ctx.store().get(&format!("{p}.skip.weight")).is_some() {
            nn::conv1d(ctx, &format!("{p}.skip"), x, 1, (0, 0), 1)?
        } else {
            x
        };
        h = ctx.tape.add(h, identity)?;
    }
    h = nn::max_pool(ctx, h, 2, 3, 3)?;
    fms(ctx, &format!("{p}.fms"), h)
}

/// Log-probabilities `(B, 2)` over (spoof, bonafide) for `wave: (B, input_len)`.
pub fn forward(ctx: &mut Ctx, cfg: &RawNet2Config, wave: Var) -> Result<Var> {
    forward_with(ctx, cfg, wave, true)
}

/// As [`forward`], optionally without residual skip connections.
pub fn forward_with(ctx: &mut Ctx, cfg: &RawNet2Config, wave: Var, skip: bool) -> Result<Var> {
    let len = ctx.shape(wave)[1];
    if len != cfg.input_len {
        return Err(Error::arg(format!(
            "rawnet2 expects {} samples, got {len}",
            cfg.input_len
        )));
    }
    let fe = frontend::forward(ctx, &cfg.frontend, wave)?;
    let mut x = fe.output;
    for i in 0..cfg.block_widths.len() {
        x = residual_block(ctx, i, x, skip)?;
        match i {
            2 => ctx.trace("stack1", x),
            5 => ctx.trace("stack2", x),
            _ => {}
        }
    }
    x = nn::batch_norm(ctx, &format!("{PREFIX}.bn_gru"), x)?;
    x = ctx.tape.selu(x)?;
    let seq = ctx.tape.permute(x, &[0, 2, 1])?;
    let h = nn::gru(ctx, &format!("{PREFIX}.gru"), seq)?;
    ctx.trace("embedding", h);
    let h = nn::linear(ctx, &format!("{PREFIX}.fc1"), h)?;
    ctx.trace("fc1", h);
    let logits = nn::linear(ctx, &format!("{PREFIX}.fc2"), h)?;
    let out = ctx.tape.log_softmax(logits)?;
    ctx.trace("output", out);
    Ok(out)
}

/// Shapes (without batch axis) that [`forward`] records, derived from the
/// configuration alone.
pub fn shape_plan(cfg: &RawNet2Config) -> Result<Vec<(String, Vec<usize>)>> {
    let (c, mut t) = cfg.frontend.output_shape(cfg.input_len)?;
    let fe_pre = t; // max pooling along time keeps the length
    let mut plan = vec![
        (
            "filterbank".to_string(),
            vec![
                cfg.frontend.filters,
                cfg.input_len - cfg.frontend.taps() + 1,
            ],
        ),
        ("pooled".to_string(), vec![cfg.frontend.filters, fe_pre]),
        ("frontend".to_string(), vec![c, t]),
    ];
    for (i, &w) in cfg.block_widths.iter().enumerate() {
        t /= 3;
        match i {
            2 => plan.push(("stack1".into(), vec![w, t])),
            5 => plan.push(("stack2".into(), vec![w, t])),
            _ => {}
        }
    }
    plan.push(("embedding".into(), vec![cfg.gru_hidden]));
    plan.push(("fc1".into(), vec![cfg.fc_hidden]));
    plan.push(("output".into(), vec![2]));
    Ok(plan)
}
