//! The decoder network.
//!
//! ```text
//! (B, C, l) ─ ConvBlock ×3 ─▶ (B, 512, l/8) ─ transpose ─▶ 2-layer Bi-GRU
//!   ─▶ (B, l/8, 1024) ─┬─ linear ─▶ MFCC      (B, l/8, 80)
//!                      └─ linear ─▶ phoneme   (B, l/8, 40)
//! ```
//!
//! A ConvBlock is a weight-standardized stride-2 convolution, group
//! normalization and a PReLU.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::BlankPolicy;
use crate::scalar::Scalar;
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
const PRELU_INIT: f64 = 0.25;

/// Named parameter tensors.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;
/// Parameters registered on a tape.
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub conv_channels: usize,
    pub n_blocks: usize,
    pub stride: usize,
    pub kernel: usize,
    pub groups: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub dropout: f64,
    pub mfcc_dim: usize,
    pub n_classes: usize,
    pub blank_policy: BlankPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 137,
            conv_channels: 512,
            n_blocks: 3,
            stride: 2,
            kernel: 3,
            groups: 16,
            gru_hidden: 512,
            gru_layers: 2,
            dropout: 0.1,
            mfcc_dim: 80,
            n_classes: 40,
            blank_policy: BlankPolicy::ReuseSil,
        }
    }
}

impl ModelConfig {
    /// Narrow variant for CPU-scale experiments; same topology.
    pub fn compact(in_channels: usize) -> Self {
        Self {
            in_channels,
            conv_channels: 64,
            gru_hidden: 64,
            ..Self::default()
        }
    }

    /// Time downsampling factor of the conv stack.
    pub fn downsample(&self) -> usize {
        self.stride.pow(self.n_blocks as u32)
    }

    pub fn head_width(&self) -> usize {
        self.blank_policy.head_width(self.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("model config: {msg}")));
        if self.in_channels == 0 || self.conv_channels == 0 || self.gru_hidden == 0 {
            return bad("sizes must be positive");
        }
        if self.n_blocks == 0 || self.gru_layers == 0 || self.kernel == 0 || self.stride == 0 {
            return bad("block, layer, kernel and stride counts must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.groups == 0 || self.conv_channels % self.groups != 0 {
            return bad("conv_channels must be divisible by groups");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("in_channels", self.in_channels);
        kv.set("conv_channels", self.conv_channels);
        kv.set("n_blocks", self.n_blocks);
        kv.set("stride", self.stride);
        kv.set("kernel", self.kernel);
        kv.set("groups", self.groups);
        kv.set("gru_hidden", self.gru_hidden);
        kv.set("gru_layers", self.gru_layers);
        kv.set("dropout", self.dropout);
        kv.set("mfcc_dim", self.mfcc_dim);
        kv.set("n_classes", self.n_classes);
        kv.set("ctc_blank_policy", self.blank_policy);
        kv
    }

    /// Reads the keys this config owns from `kv`, leaving others in place.
    pub fn update_from(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_into("in_channels", &mut self.in_channels)?;
        kv.take_into("conv_channels", &mut self.conv_channels)?;
        kv.take_into("n_blocks", &mut self.n_blocks)?;
        kv.take_into("stride", &mut self.stride)?;
        kv.take_into("kernel", &mut self.kernel)?;
        kv.take_into("groups", &mut self.groups)?;
        kv.take_into("gru_hidden", &mut self.gru_hidden)?;
        kv.take_into("gru_layers", &mut self.gru_layers)?;
        kv.take_into("dropout", &mut self.dropout)?;
        kv.take_into("mfcc_dim", &mut self.mfcc_dim)?;
        kv.take_into("n_classes", &mut self.n_classes)?;
        kv.take_into("ctc_blank_policy", &mut self.blank_policy)?;
        self.validate()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut cfg = Self::default();
        cfg.update_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    /// Tensor shapes of every parameter, with the fan-in used for init.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        let c = self.conv_channels;
        for b in 0..self.n_blocks {
            let fan = cin * self.kernel;
            out.push((format!("conv{b}.weight"), vec![c, cin, self.kernel], Init::Uniform(fan)));
            out.push((format!("conv{b}.gn_gamma"), vec![c], Init::Const(1.0)));
            out.push((format!("conv{b}.gn_beta"), vec![c], Init::Const(0.0)));
            out.push((format!("conv{b}.prelu"), vec![1], Init::Const(PRELU_INIT)));
            cin = c;
        }
        let h = self.gru_hidden;
        let mut input = c;
        for layer in 0..self.gru_layers {
            for dir in ["fwd", "bwd"] {
                let p = format!("gru{layer}.{dir}");
                out.push((format!("{p}.w_ih"), vec![3 * h, input], Init::Uniform(input)));
                out.push((format!("{p}.w_hh"), vec![3 * h, h], Init::Uniform(h)));
                out.push((format!("{p}.b_ih"), vec![3 * h], Init::Uniform(input)));
                out.push((format!("{p}.b_hh"), vec![3 * h], Init::Uniform(h)));
            }
            input = 2 * h;
        }
        out.push(("head_mfcc.weight".into(), vec![self.mfcc_dim, 2 * h], Init::Uniform(2 * h)));
        out.push(("head_mfcc.bias".into(), vec![self.mfcc_dim], Init::Uniform(2 * h)));
        out.push(("head_phoneme.weight".into(), vec![self.head_width(), 2 * h], Init::Uniform(2 * h)));
        out.push(("head_phoneme.bias".into(), vec![self.head_width()], Init::Uniform(2 * h)));
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `±sqrt(1/fan_in)`.
    Uniform(usize),
    Const(f64),
}

/// Deterministic initialization: each tensor draws from a stream keyed by
/// the seed and its position in the layout.
pub fn init_parameters<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (idx, (name, shape, init)) in cfg.layout().into_iter().enumerate() {
        let t = match init {
            Init::Const(v) => Tensor::full(shape, T::of(v)),
            Init::Uniform(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(idx as u64);
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
            }
        };
        store.insert(name, t);
    }
    Ok(store)
}

pub fn parameter_count<T>(store: &ParamStore<T>) -> usize
where
    T: Scalar,
{
    store.values().map(Tensor::len).sum()
}

/// Registers every parameter as a trainable leaf.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>) -> ParamVars {
    store
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(v.clone())))
        .collect()
}

pub fn save_parameters<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let records: Vec<(String, &Tensor<T>)> = store.iter().map(|(k, v)| (k.clone(), v)).collect();
    write_checkpoint(path, &records)
}

/// Loads a checkpoint and checks it against the config's layout.
pub fn load_parameters<T: Scalar>(path: &Path, cfg: &ModelConfig) -> Result<ParamStore<T>> {
    let store: ParamStore<T> = read_checkpoint(path)?.into_iter().collect();
    let layout = cfg.layout();
    if store.len() != layout.len() {
        return Err(Error::invalid(format!(
            "{}: {} tensors, config expects {}",
            path.display(),
            store.len(),
            layout.len()
        )));
    }
    for (name, shape, _) in layout {
        match store.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => return Err(Error::shape("checkpoint tensor", t.shape(), &shape)),
            None => return Err(Error::invalid(format!("{}: missing tensor {name}", path.display()))),
        }
    }
    Ok(store)
}

/// Forward-pass results on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `(B, conv_channels, l/8)`.
    pub conv_features: Var,
    /// `(B, l/8, 2·hidden)`.
    pub gru_features: Var,
    /// `(B, l/8, 80)`.
    pub mfcc: Var,
    /// `(B, l/8, K)`.
    pub logits: Var,
    pub logprobs: Var,
}

fn p(params: &ParamVars, name: &str) -> Result<Var> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

/// Stream of dropout seeds derived from one forward-pass seed.
fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + k);
    rng.random()
}

/// One GRU direction over `(B, T, I)`; returns `(B, T, H)`.
fn gru_direction<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &ParamVars, prefix: &str, hidden: usize, reverse: bool) -> Result<Var> {
    let (b, t_len, input) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let h3 = 3 * hidden;
    let w_ih = p(params, &format!("{prefix}.w_ih"))?;
    let w_hh = p(params, &format!("{prefix}.w_hh"))?;
    let b_ih = p(params, &format!("{prefix}.b_ih"))?;
    let b_hh = p(params, &format!("{prefix}.b_hh"))?;

    let flat = tape.reshape(x, &[b * t_len, input])?;
    let xp = tape.matmul_nt(flat, w_ih)?;
    let xp = tape.add_bias(xp, b_ih)?;
    let xp = tape.reshape(xp, &[b, t_len, h3])?;

    let mut h = tape.constant(Tensor::zeros(vec![b, hidden]));
    let mut outs = vec![None; t_len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let xt = tape.slice(xp, 1, t, t + 1)?;
        let xt = tape.reshape(xt, &[b, h3])?;
        let hp = tape.matmul_nt(h, w_hh)?;
        let hp = tape.add_bias(hp, b_hh)?;
        let gate = |tape: &mut Tape<T>, v: Var, k: usize| tape.slice(v, 1, k * hidden, (k + 1) * hidden);
        let (xr, xz, xn) = (gate(tape, xt, 0)?, gate(tape, xt, 1)?, gate(tape, xt, 2)?);
        let (hr, hz, hn) = (gate(tape, hp, 0)?, gate(tape, hp, 1)?, gate(tape, hp, 2)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let n = tape.mul(r, hn)?;
        let n = tape.add(xn, n)?;
        let n = tape.tanh(n);
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let d = tape.sub(h, n)?;
        let d = tape.mul(z, d)?;
        h = tape.add(n, d)?;
        outs[t] = Some(tape.reshape(h, &[b, 1, hidden])?);
    }
    let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
    tape.concat(&outs, 1)
}

fn linear_head<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &ParamVars, name: &str) -> Result<Var> {
    let (b, t, d) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let w = p(params, &format!("{name}.weight"))?;
    let bias = p(params, &format!("{name}.bias"))?;
    let out = tape.value(w).shape()[0];
    let flat = tape.reshape(x, &[b * t, d])?;
    let y = tape.matmul_nt(flat, w)?;
    let y = tape.add_bias(y, bias)?;
    tape.reshape(y, &[b, t, out])
}

/// Runs the network on `x` of shape `(B, C, l)`.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamVars,
    x: Var,
    train: bool,
    seed: u64,
) -> Result<ModelOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != cfg.in_channels {
        return Err(Error::shape("model input (B, C, l)", &shape, &[0, cfg.in_channels, 0]));
    }
    if shape[2] == 0 || shape[2] % cfg.downsample() != 0 {
        return Err(Error::invalid(format!(
            "input length {} is not a positive multiple of {}",
            shape[2],
            cfg.downsample()
        )));
    }
    let mut h = x;
    for blk in 0..cfg.n_blocks {
        let w = p(params, &format!("conv{blk}.weight"))?;
        let w = tape.weight_standardize(w, NORM_EPS)?;
        h = tape.conv1d(h, w, None, cfg.stride, cfg.kernel / 2)?;
        let gamma = p(params, &format!("conv{blk}.gn_gamma"))?;
        let beta = p(params, &format!("conv{blk}.gn_beta"))?;
        h = tape.group_norm(h, cfg.groups, NORM_EPS, Some(gamma), Some(beta))?;
        let slope = p(params, &format!("conv{blk}.prelu"))?;
        h = tape.prelu(h, slope)?;
    }
    let conv_features = h;
    let mut seq = tape.permute(h, &[0, 2, 1])?;
    for layer in 0..cfg.gru_layers {
        if layer > 0 {
            seq = tape.dropout(seq, cfg.dropout, train, sub_seed(seed, layer as u64))?;
        }
        let fwd = gru_direction(tape, seq, params, &format!("gru{layer}.fwd"), cfg.gru_hidden, false)?;
        let bwd = gru_direction(tape, seq, params, &format!("gru{layer}.bwd"), cfg.gru_hidden, true)?;
        seq = tape.concat(&[fwd, bwd], 2)?;
    }
    let gru_features = seq;
    let mfcc = linear_head(tape, seq, params, "head_mfcc")?;
    let logits = linear_head(tape, seq, params, "head_phoneme")?;
    let logprobs = tape.log_softmax(logits, 2)?;
    Ok(ModelOutput {
        conv_features,
        gru_features,
        mfcc,
        logits,
        logprobs,
    })
}
