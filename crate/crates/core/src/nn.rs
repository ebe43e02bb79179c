//! Parameters, a forward-pass context, and the layers shared by both backbones.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, PoolPad, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Named parameters, ordered by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Replaces every value with the one from `other`, which must hold the
    /// same paths and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.entries {
            let q = other
                .get(name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter {name}")))?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::contract(format!(
                    "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                    q.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::contract(format!(
                "checkpoint has unknown parameter {extra}"
            )));
        }
        for (name, p) in self.entries.iter_mut() {
            p.value = other.entries[name].value.clone();
        }
        Ok(())
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// State of one forward pass: the tape, bound parameters, mode flags.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    train: bool,
    with_grad: bool,
    rng: Option<ChaCha8Rng>,
    bn_updates: Vec<BnUpdate>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'a> Ctx<'a> {
    /// `train` selects batch statistics and dropout; `with_grad` marks
    /// trainable parameters as differentiable.
    pub fn new(store: &'a ParamStore, train: bool, with_grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            train,
            with_grad,
            rng: None,
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for a stored parameter, recorded on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
        let mut t = p.value.clone();
        t.set_requires_grad(self.with_grad && p.trainable);
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Records the shape of `v` without its leading batch axis.
    pub fn trace(&mut self, label: &str, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push((label.to_string(), self.tape.shape(v)[1..].to_vec()));
        }
    }

    /// Records an explicit shape (for layouts that differ from storage order).
    pub fn trace_shape(&mut self, label: &str, shape: Vec<usize>) {
        if let Some(t) = &mut self.trace {
            t.push((label.to_string(), shape));
        }
    }

    pub fn take_trace(&mut self) -> Vec<(String, Vec<usize>)> {
        self.trace.take().unwrap_or_default()
    }

    pub fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        self.rng
            .as_mut()
            .ok_or_else(|| Error::contract("training-mode dropout needs a seeded generator"))
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Back-propagates `loss`; returns gradients keyed by parameter path and
    /// the batch-norm statistics observed during the pass.
    pub fn backward(self, loss: Var) -> Result<(BTreeMap<String, Tensor>, Vec<BnUpdate>)> {
        let Ctx {
            tape,
            bound,
            bn_updates,
            ..
        } = self;
        let mut grads: Gradients = tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, v) in bound {
            if let Some(g) = grads.take(v) {
                out.insert(name, g);
            }
        }
        Ok((out, bn_updates))
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }
}

/// Folds observed batch statistics into the running averages.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        for (suffix, obs) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.{suffix}", u.prefix);
            let p = store
                .get_mut(&name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
            for (r, o) in p.value.data_mut().iter_mut().zip(obs.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
        }
    }
    Ok(())
}

/// `U(-bound, bound)` initialization.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        uniform(rng, &[fan_in, fan_out], bound),
        true,
    );
    store.insert(
        format!("{prefix}.bias"),
        uniform(rng, &[fan_out], bound),
        true,
    );
}

/// Conv weights `(c_out, c_in, k...)`.
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    shape: &[usize],
    bias: bool,
) {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, shape, bound), true);
    if bias {
        store.insert(
            format!("{prefix}.bias"),
            uniform(rng, &shape[..1], bound),
            true,
        );
    }
}

pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(
        format!("{prefix}.gamma"),
        Tensor::full(&[channels], 1.0),
        true,
    );
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true);
    store.insert(
        format!("{prefix}.running_mean"),
        Tensor::zeros(&[channels]),
        false,
    );
    store.insert(
        format!("{prefix}.running_var"),
        Tensor::full(&[channels], 1.0),
        false,
    );
}

pub fn init_gru(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) {
    let bound = 1.0 / (hidden as f64).sqrt();
    store.insert(
        format!("{prefix}.weight_ih"),
        uniform(rng, &[input, 3 * hidden], bound),
        true,
    );
    store.insert(
        format!("{prefix}.weight_hh"),
        uniform(rng, &[hidden, 3 * hidden], bound),
        true,
    );
    store.insert(
        format!("{prefix}.bias_ih"),
        uniform(rng, &[3 * hidden], bound),
        true,
    );
    store.insert(
        format!("{prefix}.bias_hh"),
        uniform(rng, &[3 * hidden], bound),
        true,
    );
}

/// `x @ W + b` over the last axis of `x`.
pub fn linear(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    let shape = ctx.shape(x).to_vec();
    let fan_in = *shape.last().unwrap();
    let fan_out = ctx.shape(w)[1];
    let rows = shape.iter().product::<usize>() / fan_in;
    let x2 = ctx.tape.reshape(x, &[rows, fan_in])?;
    let y = ctx.tape.matmul(x2, w)?;
    let b2 = ctx.tape.reshape(b, &[1, fan_out])?;
    let bb = ctx.tape.broadcast_to(b2, &[rows, fan_out])?;
    let y = ctx.tape.add(y, bb)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    ctx.tape.reshape(y, &out_shape)
}

/// Adds a per-channel bias to axis 1 of `x`.
pub fn add_channel_bias(ctx: &mut Ctx, x: Var, b: Var) -> Result<Var> {
    let shape = ctx.shape(x).to_vec();
    let mut bshape = vec![1; shape.len()];
    bshape[1] = shape[1];
    let br = ctx.tape.reshape(b, &bshape)?;
    let bb = ctx.tape.broadcast_to(br, &shape)?;
    ctx.tape.add(x, bb)
}

pub fn conv1d(
    ctx: &mut Ctx,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: (usize, usize),
    groups: usize,
) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let bname = format!("{prefix}.bias");
    let b = if ctx.store().get(&bname).is_some() {
        Some(ctx.param(&bname)?)
    } else {
        None
    };
    ctx.tape.conv1d(x, w, b, stride, pad, groups)
}

pub fn conv2d(ctx: &mut Ctx, prefix: &str, x: Var, pad: (usize, usize)) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let bname = format!("{prefix}.bias");
    let b = if ctx.store().get(&bname).is_some() {
        Some(ctx.param(&bname)?)
    } else {
        None
    };
    ctx.tape.conv2d(x, w, b, pad)
}

/// Batch norm over axis 1 using batch statistics in training mode and the
/// running averages otherwise.
pub fn batch_norm(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    if ctx.train {
        let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, None, BN_EPS)?;
        let (mean, var) = stats.expect("training mode returns statistics");
        ctx.bn_updates.push(BnUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
        });
        Ok(y)
    } else {
        let rm = ctx.store.value(&format!("{prefix}.running_mean"))?.data();
        let rv = ctx.store.value(&format!("{prefix}.running_var"))?.data();
        let (y, _) = ctx
            .tape
            .batch_norm(x, gamma, beta, Some((rm, rv)), BN_EPS)?;
        Ok(y)
    }
}

/// Max pooling along `axis` with floor-mode output length.
pub fn max_pool(ctx: &mut Ctx, x: Var, axis: usize, kernel: usize, stride: usize) -> Result<Var> {
    ctx.tape.max_pool(x, axis, kernel, stride, PoolPad::NONE)
}

/// Inverted dropout; identity outside training mode.
pub fn dropout(ctx: &mut Ctx, x: Var, p: f64) -> Result<Var> {
    if !ctx.train || p == 0.0 {
        return Ok(x);
    }
    let shape = ctx.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let rng = ctx.rng()?;
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = ctx.constant(Tensor::new(shape, mask)?);
    ctx.tape.mul(x, m)
}

/// Runs a GRU over `x: (B, T, F)` from a zero state; returns the final
/// hidden state `(B, H)`.
pub fn gru(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let w_ih = ctx.param(&format!("{prefix}.weight_ih"))?;
    let w_hh = ctx.param(&format!("{prefix}.weight_hh"))?;
    let b_ih = ctx.param(&format!("{prefix}.bias_ih"))?;
    let b_hh = ctx.param(&format!("{prefix}.bias_hh"))?;
    let shape = ctx.shape(x).to_vec();
    let [b, t, f] = shape[..] else {
        return Err(Error::arg(format!(
            "gru: expected (B, T, F), got {shape:?}"
        )));
    };
    let h3 = ctx.shape(w_ih)[1];
    let hidden = h3 / 3;
    if ctx.shape(w_ih)[0] != f {
        return Err(Error::shape("gru", &shape, ctx.shape(w_ih)));
    }
    // Input projections for all steps at once.
    let x2 = ctx.tape.reshape(x, &[b * t, f])?;
    let gi = ctx.tape.matmul(x2, w_ih)?;
    let bi = ctx.tape.reshape(b_ih, &[1, h3])?;
    let bi = ctx.tape.broadcast_to(bi, &[b * t, h3])?;
    let gi = ctx.tape.add(gi, bi)?;
    let gi = ctx.tape.reshape(gi, &[b, t, h3])?;
    let bh = ctx.tape.reshape(b_hh, &[1, h3])?;
    let bh = ctx.tape.broadcast_to(bh, &[b, h3])?;

    let mut h = ctx.constant(Tensor::zeros(&[b, hidden]));
    for step in 0..t {
        let g = ctx.tape.narrow(gi, 1, step, 1)?;
        let g = ctx.tape.reshape(g, &[b, h3])?;
        let gh = ctx.tape.matmul(h, w_hh)?;
        let gh = ctx.tape.add(gh, bh)?;
        let part = |ctx: &mut Ctx, v: Var, k: usize| ctx.tape.narrow(v, 1, k * hidden, hidden);
        let (ir, iz, inn) = (part(ctx, g, 0)?, part(ctx, g, 1)?, part(ctx, g, 2)?);
        let (hr, hz, hn) = (part(ctx, gh, 0)?, part(ctx, gh, 1)?, part(ctx, gh, 2)?);
        let r = ctx.tape.add(ir, hr)?;
        let r = ctx.tape.sigmoid(r)?;
        let z = ctx.tape.add(iz, hz)?;
        let z = ctx.tape.sigmoid(z)?;
        let rn = ctx.tape.mul(r, hn)?;
        let n = ctx.tape.add(inn, rn)?;
        let n = ctx.tape.tanh(n)?;
        // h' = n + z * (h - n)
        let d = ctx.tape.sub(h, n)?;
        let zd = ctx.tape.mul(z, d)?;
        h = ctx.tape.add(n, zd)?;
    }
    Ok(h)
}

/// Mean negative log-likelihood of class `labels` under log-probabilities `(B, C)`.
pub fn nll_loss(ctx: &mut Ctx, logp: Var, labels: &[usize]) -> Result<Var> {
    let shape = ctx.shape(logp).to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::arg(format!(
            "nll_loss: expected (B, C), got {shape:?}"
        )));
    };
    if labels.len() != b || labels.iter().any(|&l| l >= c) {
        return Err(Error::arg("nll_loss: labels do not match the batch"));
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = -1.0 / b as f64;
    }
    let m = ctx.constant(Tensor::new(vec![b, c], onehot)?);
    let prod = ctx.tape.mul(logp, m)?;
    ctx.tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gru_single_step_matches_scalar_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let (f, h) = (3, 4);
        init_gru(&mut store, &mut rng, "gru", f, h);
        let x = uniform(&mut rng, &[2, 1, f], 1.0);
        let mut ctx = Ctx::new(&store, false, false);
        let xv = ctx.constant(x.clone());
        let out = gru(&mut ctx, "gru", xv).unwrap();
        let got = ctx.value(out).clone();

        let w_ih = store.value("gru.weight_ih").unwrap();
        let b_ih = store.value("gru.bias_ih").unwrap();
        let b_hh = store.value("gru.bias_hh").unwrap();
        for bi in 0..2 {
            let gi = |j: usize| {
                (0..f)
                    .map(|k| x.at(&[bi, 0, k]) * w_ih.at(&[k, j]))
                    .sum::<f64>()
                    + b_ih.data()[j]
            };
            for u in 0..h {
                // Zero initial state: W_hh h vanishes, only its bias remains.
                let r = sigmoid(gi(u) + b_hh.data()[u]);
                let z = sigmoid(gi(h + u) + b_hh.data()[h + u]);
                let n = (gi(2 * h + u) + r * b_hh.data()[2 * h + u]).tanh();
                let expect = (1.0 - z) * n;
                assert!((got.at(&[bi, u]) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let mut store = ParamStore::new();
        init_batch_norm(&mut store, "bn", 2);
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 2.0, 2.0]).unwrap();
        let mut ctx = Ctx::new(&store, true, false);
        let xv = ctx.constant(x);
        batch_norm(&mut ctx, "bn", xv).unwrap();
        let updates = ctx.into_bn_updates();
        apply_bn_updates(&mut store, &updates).unwrap();
        let rm = store.value("bn.running_mean").unwrap().data();
        assert!((rm[0] - 0.4).abs() < 1e-12);
        assert!((rm[1] - 0.1).abs() < 1e-12);
        let rv = store.value("bn.running_var").unwrap().data();
        // Unbiased variance of {1,3,5,7} is 20/3.
        assert!((rv[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn load_from_rejects_shape_mismatch() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(&[2]), true);
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(&[3]), true);
        let err = a.load_from(&b).unwrap_err().to_string();
        assert!(err.contains("parameter w"));
    }

    #[test]
    fn nll_of_uniform_prediction() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false, false);
        let logp = ctx.constant(Tensor::full(&[3, 2], 0.5f64.ln()));
        let l = nll_loss(&mut ctx, logp, &[0, 1, 1]).unwrap();
        assert!((ctx.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }
}
