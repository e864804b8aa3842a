//! Dense tanh networks, the recurrent memory cell, exact backprop and the
//! optimizers. Parameters live in one flat vector described by a manifest.

use crate::error::{Error, Result};
use rand::Rng;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

pub type MemoryVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub size: usize,
    pub activation: Activation,
}

/// Layer sizes: input, tanh hidden layers, then an output layer split into
/// heads with their own activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub heads: Vec<Head>,
}

impl Manifest {
    pub fn new(input: usize, hidden: Vec<usize>, heads: Vec<Head>) -> Self {
        Manifest {
            input,
            hidden,
            heads,
        }
    }

    /// Recurrent cell: features and memory in, logits and memory out.
    pub fn recurrent(features: usize, memory: usize, hidden: Vec<usize>, logits: usize) -> Self {
        Manifest {
            input: features + memory,
            hidden,
            heads: vec![
                Head {
                    size: logits,
                    activation: Activation::Identity,
                },
                Head {
                    size: memory,
                    activation: Activation::Tanh,
                },
            ],
        }
    }

    pub fn output(&self) -> usize {
        self.heads.iter().map(|h| h.size).sum()
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output());
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn describe(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let heads: Vec<String> = self
            .heads
            .iter()
            .map(|h| {
                format!(
                    "{}:{}",
                    h.size,
                    if h.activation == Activation::Tanh {
                        "tanh"
                    } else {
                        "id"
                    }
                )
            })
            .collect();
        format!(
            "in={} hidden={} heads={}",
            self.input,
            hidden.join(","),
            heads.join(",")
        )
    }

    pub fn parse(desc: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("bad manifest `{desc}`"));
        let mut input = None;
        let mut hidden = Vec::new();
        let mut heads = Vec::new();
        for part in desc.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k {
                "in" => input = Some(v.parse().map_err(|_| bad())?),
                "hidden" => {
                    for h in v.split(',').filter(|s| !s.is_empty()) {
                        hidden.push(h.parse().map_err(|_| bad())?);
                    }
                }
                "heads" => {
                    for h in v.split(',') {
                        let (n, a) = h.split_once(':').ok_or_else(bad)?;
                        let activation = match a {
                            "tanh" => Activation::Tanh,
                            "id" => Activation::Identity,
                            _ => return Err(bad()),
                        };
                        heads.push(Head {
                            size: n.parse().map_err(|_| bad())?,
                            activation,
                        });
                    }
                }
                _ => return Err(bad()),
            }
        }
        Ok(Manifest {
            input: input.ok_or_else(bad)?,
            hidden,
            heads,
        })
    }
}

static VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Weights {
    manifest: Manifest,
    values: Vec<f64>,
    version: u64,
}

impl PartialEq for Weights {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest && self.values == other.values
    }
}

impl Weights {
    pub fn zeros(manifest: Manifest) -> Self {
        let n = manifest.n_params();
        Weights {
            manifest,
            values: vec![0.0; n],
            version: next_version(),
        }
    }

    /// Uniform Glorot initialisation with zero biases.
    pub fn random(manifest: Manifest, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(manifest);
        let widths = w.manifest.widths();
        let mut off = 0;
        for p in widths.windows(2) {
            let a = (6.0 / (p[0] + p[1]) as f64).sqrt();
            for v in &mut w.values[off..off + p[0] * p[1]] {
                *v = rng.gen_range(-a..a);
            }
            off += p[0] * p[1] + p[1];
        }
        w
    }

    pub fn from_values(manifest: Manifest, values: Vec<f64>) -> Result<Self> {
        if values.len() != manifest.n_params() {
            return Err(Error::Shape(format!(
                "{} values for a manifest of {} parameters",
                values.len(),
                manifest.n_params()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("weight {v}")));
        }
        Ok(Weights {
            manifest,
            values,
            version: next_version(),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mutable access; invalidates caches taken from earlier forwards.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version = next_version();
        &mut self.values
    }
}

#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    /// Input followed by the post-activation output of every layer.
    acts: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

pub fn forward(w: &Weights, input: &[f64]) -> Result<Cache> {
    let m = &w.manifest;
    if input.len() != m.input {
        return Err(Error::Shape(format!(
            "input of length {} for manifest {}",
            input.len(),
            m.describe()
        )));
    }
    let widths = m.widths();
    let n_layers = widths.len() - 1;
    let mut acts = Vec::with_capacity(widths.len());
    acts.push(input.to_vec());
    let mut off = 0;
    for l in 0..n_layers {
        let (ni, no) = (widths[l], widths[l + 1]);
        let x = &acts[l];
        let wm = &w.values[off..off + ni * no];
        let b = &w.values[off + ni * no..off + ni * no + no];
        let mut z: Vec<f64> = b.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &wm[o * ni..(o + 1) * ni];
            *zo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        if l + 1 < n_layers {
            z.iter_mut().for_each(|v| *v = v.tanh());
        } else {
            let mut k = 0;
            for h in &m.heads {
                if h.activation == Activation::Tanh {
                    z[k..k + h.size].iter_mut().for_each(|v| *v = v.tanh());
                }
                k += h.size;
            }
        }
        acts.push(z);
        off += ni * no + no;
    }
    Ok(Cache {
        version: w.version,
        acts,
    })
}

/// Accumulates the parameter gradient into `grad` and returns the gradient
/// with respect to the input.
pub fn backward(w: &Weights, cache: &Cache, d_out: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
    if cache.version != w.version {
        return Err(Error::StaleCache(
            "weights changed since the forward pass".into(),
        ));
    }
    let m = &w.manifest;
    if d_out.len() != m.output() || grad.len() != w.values.len() {
        return Err(Error::Shape(
            "gradient buffers do not match the manifest".into(),
        ));
    }
    let widths = m.widths();
    let n_layers = widths.len() - 1;
    let mut offs = Vec::with_capacity(n_layers);
    let mut off = 0;
    for p in widths.windows(2) {
        offs.push(off);
        off += p[0] * p[1] + p[1];
    }
    // Gradient with respect to the pre-activation of the output layer.
    let out = &cache.acts[n_layers];
    let mut delta = d_out.to_vec();
    let mut k = 0;
    for h in &m.heads {
        if h.activation == Activation::Tanh {
            for i in k..k + h.size {
                delta[i] *= 1.0 - out[i] * out[i];
            }
        }
        k += h.size;
    }
    for l in (0..n_layers).rev() {
        let (ni, no) = (widths[l], widths[l + 1]);
        let x = &cache.acts[l];
        let o = offs[l];
        let mut dx = vec![0.0; ni];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let gw = &mut grad[o + r * ni..o + (r + 1) * ni];
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += d * xi;
            }
            grad[o + ni * no + r] += d;
            let row = &w.values[o + r * ni..o + (r + 1) * ni];
            for (dxi, wi) in dx.iter_mut().zip(row) {
                *dxi += d * wi;
            }
        }
        if l > 0 {
            for (dxi, xi) in dx.iter_mut().zip(x) {
                *dxi *= 1.0 - xi * xi;
            }
        }
        delta = dx;
    }
    Ok(delta)
}

/// One recurrent step: `(logits, new memory, cache)`.
pub fn cell_forward(
    w: &Weights,
    features: &[f64],
    memory: &[f64],
) -> Result<(Vec<f64>, MemoryVector, Cache)> {
    let mut x = Vec::with_capacity(features.len() + memory.len());
    x.extend_from_slice(features);
    x.extend_from_slice(memory);
    let cache = forward(w, &x)?;
    let k = w.manifest.heads[0].size;
    let out = cache.output();
    Ok((out[..k].to_vec(), out[k..].to_vec(), cache))
}

/// Returns the gradient with respect to the incoming memory.
pub fn cell_backward(
    w: &Weights,
    cache: &Cache,
    d_logits: &[f64],
    d_memory: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let mut d = Vec::with_capacity(d_logits.len() + d_memory.len());
    d.extend_from_slice(d_logits);
    d.extend_from_slice(d_memory);
    let dx = backward(w, cache, &d, grad)?;
    let d_m = dx.len() - d_memory.len();
    Ok(dx[d_m..].to_vec())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let acc = if matches!(kind, OptimizerKind::Adam { .. }) {
            n
        } else {
            0
        };
        OptimizerState {
            kind,
            lr,
            m: vec![0.0; acc],
            v: vec![0.0; acc],
            step: 0,
        }
    }
}

pub fn update(w: &mut Weights, grad: &[f64], opt: &mut OptimizerState) -> Result<()> {
    if grad.len() != w.len() {
        return Err(Error::Shape(format!(
            "gradient of length {} for {} weights",
            grad.len(),
            w.len()
        )));
    }
    if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {g}")));
    }
    opt.step += 1;
    let lr = opt.lr;
    match opt.kind {
        OptimizerKind::Sgd => {
            for (v, g) in w.values_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            if opt.m.len() != grad.len() {
                return Err(Error::Shape(
                    "optimizer accumulators do not match weights".into(),
                ));
            }
            let t = opt.step as i32;
            let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            let (m, v) = (&mut opt.m, &mut opt.v);
            let vals = w.values_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                if g != 0.0 || m[i] != 0.0 {
                    vals[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Largest relative error between `analytic` and central differences of `f`
/// over all parameters. Entries where both are below `floor` are skipped.
pub fn gradient_check(
    f: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let num = (up - down) / (2.0 * h);
        let a = analytic[i];
        if a.abs() < floor && num.abs() < floor {
            continue;
        }
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()));
    }
    worst
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLST";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header `PLST`, u32 version, u32-length-prefixed UTF-8 description, u64
/// value count, then little-endian f64 values.
pub fn write_checkpoint(out: &mut impl Write, description: &str, values: &[f64]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(description.len() as u32).to_le_bytes())?;
    out.write_all(description.as_bytes())?;
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<(String, Vec<f64>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    input.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut desc = vec![0u8; len];
    input.read_exact(&mut desc)?;
    let desc = String::from_utf8(desc)
        .map_err(|_| Error::Checkpoint("description is not UTF-8".into()))?;
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        input.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Ok((desc, values))
}

pub fn save_weights(out: &mut impl Write, w: &Weights) -> Result<()> {
    write_checkpoint(out, &w.manifest.describe(), &w.values)
}

pub fn load_weights(input: &mut impl Read) -> Result<Weights> {
    let (desc, values) = read_checkpoint(input)?;
    Weights::from_values(Manifest::parse(&desc)?, values)
}
