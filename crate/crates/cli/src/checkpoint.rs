//! Scheme checkpoints: a run of weight-file blocks behind a header block.
//!
//! Block order: header, one block per encoder site, the decoder, one
//! optimizer block per encoder site, the decoder optimizer, the baselines.

use std::io::{Read, Write};
use stuffml::codec::{Decoder, DecoderKind, EncoderFleet, NeuralScheme, NullEncoding};
use stuffml::nets::{
    load_weights, read_checkpoint, save_weights, write_checkpoint, OptimizerKind, OptimizerState,
};
use stuffml::training::TrainState;
use stuffml::{Error, Result};

pub const FORMAT: &str = "scheme v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub scheme: NeuralScheme,
    pub state: TrainState,
}

fn opt_desc(o: &OptimizerState) -> String {
    match o.kind {
        OptimizerKind::Sgd => format!("sgd {:?} {}", o.lr, o.step),
        OptimizerKind::Adam { beta1, beta2, eps } => {
            format!("adam {:?} {} {beta1:?} {beta2:?} {eps:?}", o.lr, o.step)
        }
    }
}

fn parse_opt(desc: &str, values: Vec<f64>) -> Result<OptimizerState> {
    let bad = || Error::Checkpoint(format!("bad optimizer block `{desc}`"));
    let p: Vec<&str> = desc.split_whitespace().collect();
    let f = |i: usize| p.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
    let lr = f(1)?;
    let step = p.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let kind = match p.first() {
        Some(&"sgd") => OptimizerKind::Sgd,
        Some(&"adam") => OptimizerKind::Adam {
            beta1: f(3)?,
            beta2: f(4)?,
            eps: f(5)?,
        },
        _ => return Err(bad()),
    };
    if !values.len().is_multiple_of(2) {
        return Err(bad());
    }
    let (m, v) = values.split_at(values.len() / 2);
    Ok(OptimizerState {
        kind,
        lr,
        m: m.to_vec(),
        v: v.to_vec(),
        step,
    })
}

impl Checkpoint {
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        let s = &self.scheme;
        let header = format!(
            "{FORMAT}\niteration {}\nsites {}\nd_m {}\nalphabet {}\nmask {}\ndecoder {}\nnull {}\n--- config\n{}",
            self.state.iteration,
            s.fleet.weights.len(),
            s.fleet.d_m,
            s.fleet.alphabet,
            s.fleet.mask_size,
            if s.decoder.kind == DecoderKind::Gated { "gated" } else { "mlp" },
            if s.null == NullEncoding::Trainable { "trainable" } else { "frozen" },
            self.config
        );
        write_checkpoint(out, &header, &[])?;
        for w in &s.fleet.weights {
            save_weights(out, w)?;
        }
        save_weights(out, &s.decoder.weights)?;
        for o in self
            .state
            .enc
            .iter()
            .chain(std::iter::once(&self.state.dec))
        {
            write_checkpoint(out, &opt_desc(o), &[o.m.clone(), o.v.clone()].concat())?;
        }
        let avg: Vec<f64> = self
            .state
            .average
            .iter()
            .map(|a| a.unwrap_or(f64::NAN))
            .collect();
        write_checkpoint(out, "baselines", &avg)
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        let (header, _) = read_checkpoint(input)?;
        let (meta, config) = header
            .split_once("--- config\n")
            .ok_or_else(|| Error::Checkpoint("header has no config echo".into()))?;
        let mut lines = meta.lines();
        if lines.next() != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("expected `{FORMAT}` checkpoint")));
        }
        let mut field = |name: &str| -> Result<String> {
            let l = lines.next().unwrap_or("");
            l.strip_prefix(name)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}` in header")))
        };
        let int = |s: String| {
            s.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad integer `{s}`")))
        };
        let iteration = int(field("iteration")?)?;
        let sites = int(field("sites")?)?;
        let d_m = int(field("d_m")?)?;
        let alphabet = int(field("alphabet")?)?;
        let mask_size = int(field("mask")?)?;
        let kind = match field("decoder")?.as_str() {
            "gated" => DecoderKind::Gated,
            "mlp" => DecoderKind::Mlp,
            k => return Err(Error::Checkpoint(format!("unknown decoder `{k}`"))),
        };
        let null = match field("null")?.as_str() {
            "trainable" => NullEncoding::Trainable,
            "frozen" => NullEncoding::Frozen,
            k => return Err(Error::Checkpoint(format!("unknown null encoding `{k}`"))),
        };
        let weights = (0..sites)
            .map(|_| load_weights(input))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder {
            weights: load_weights(input)?,
            mask_size,
            kind,
        };
        let mut opts = Vec::with_capacity(sites + 1);
        for _ in 0..=sites {
            let (d, v) = read_checkpoint(input)?;
            opts.push(parse_opt(&d, v)?);
        }
        let dec = opts.pop().expect("decoder optimizer");
        let (d, avg) = read_checkpoint(input)?;
        if d != "baselines" {
            return Err(Error::Checkpoint("missing baselines block".into()));
        }
        Ok(Checkpoint {
            config: config.to_string(),
            scheme: NeuralScheme {
                fleet: EncoderFleet {
                    weights,
                    d_m,
                    alphabet,
                    mask_size,
                },
                decoder,
                null,
            },
            state: TrainState {
                enc: opts,
                dec,
                iteration,
                average: avg
                    .into_iter()
                    .map(|a| if a.is_nan() { None } else { Some(a) })
                    .collect(),
            },
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, &buf)?;
        Ok(buf)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read(&mut bytes.as_slice())
    }
}
