//! The 14-gate universal set and its Kraus semantics.
//!
//! Two-qubit operators act on `|left right>` with the left qubit as the most
//! significant bit.

use crate::error::{Error, Result};
use nalgebra::{Matrix2, Matrix4};
use num_complex::Complex64;
use std::fmt;
use std::str::FromStr;

pub type C64 = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateLabel {
    Cnot,
    HI,
    IH,
    PI,
    IP,
    RI,
    IR,
    II,
    Swap,
    PrepZZ,
    M0I,
    M1I,
    IM0,
    IM1,
    Null,
}

pub const UGS: [GateLabel; 14] = [
    GateLabel::Cnot,
    GateLabel::HI,
    GateLabel::IH,
    GateLabel::PI,
    GateLabel::IP,
    GateLabel::RI,
    GateLabel::IR,
    GateLabel::II,
    GateLabel::Swap,
    GateLabel::PrepZZ,
    GateLabel::M0I,
    GateLabel::M1I,
    GateLabel::IM0,
    GateLabel::IM1,
];

/// All labels including NULL, in feature-encoding order.
pub const ALL_LABELS: [GateLabel; 15] = [
    GateLabel::Cnot,
    GateLabel::HI,
    GateLabel::IH,
    GateLabel::PI,
    GateLabel::IP,
    GateLabel::RI,
    GateLabel::IR,
    GateLabel::II,
    GateLabel::Swap,
    GateLabel::PrepZZ,
    GateLabel::M0I,
    GateLabel::M1I,
    GateLabel::IM0,
    GateLabel::IM1,
    GateLabel::Null,
];

pub const DEFAULT_R_PHASE: f64 = std::f64::consts::PI / 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// A Z outcome on one side of a gate, e.g. `left=0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Outcome {
    pub side: Side,
    pub bit: u8,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.side.name(), self.bit)
    }
}

impl FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownGate(format!("bad outcome `{s}`"));
        let (side, bit) = s.split_once('=').ok_or_else(bad)?;
        let side = match side {
            "left" => Side::Left,
            "right" => Side::Right,
            _ => return Err(bad()),
        };
        let bit = match bit {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad()),
        };
        Ok(Outcome { side, bit })
    }
}

impl GateLabel {
    pub fn mnemonic(self) -> &'static str {
        match self {
            GateLabel::Cnot => "CNOT",
            GateLabel::HI => "HI",
            GateLabel::IH => "IH",
            GateLabel::PI => "PI",
            GateLabel::IP => "IP",
            GateLabel::RI => "RI",
            GateLabel::IR => "IR",
            GateLabel::II => "II",
            GateLabel::Swap => "SWAP",
            GateLabel::PrepZZ => "PREPZZ",
            GateLabel::M0I => "M0I",
            GateLabel::M1I => "M1I",
            GateLabel::IM0 => "IM0",
            GateLabel::IM1 => "IM1",
            GateLabel::Null => "NULL",
        }
    }

    pub fn index(self) -> usize {
        ALL_LABELS.iter().position(|&g| g == self).unwrap()
    }

    /// The measured side and designated bit of a subset-3 gate.
    pub fn measurement(self) -> Option<Outcome> {
        let o = |side, bit| Some(Outcome { side, bit });
        match self {
            GateLabel::M0I => o(Side::Left, 0),
            GateLabel::M1I => o(Side::Left, 1),
            GateLabel::IM0 => o(Side::Right, 0),
            GateLabel::IM1 => o(Side::Right, 1),
            _ => None,
        }
    }

    pub fn is_measurement(self) -> bool {
        self.measurement().is_some()
    }

    /// The measurement gate selecting `outcome`.
    pub fn from_outcome(outcome: Outcome) -> GateLabel {
        match (outcome.side, outcome.bit) {
            (Side::Left, 0) => GateLabel::M0I,
            (Side::Left, _) => GateLabel::M1I,
            (Side::Right, 0) => GateLabel::IM0,
            (Side::Right, _) => GateLabel::IM1,
        }
    }

    /// Whether the factor acting on `side` is the identity, so an open input on
    /// that side can be shunted straight through.
    pub fn identity_on(self, side: Side) -> bool {
        use GateLabel::*;
        match side {
            Side::Left => matches!(self, IH | IP | IR | II | IM0 | IM1),
            Side::Right => matches!(self, HI | PI | RI | II | M0I | M1I),
        }
    }

    pub fn absorbs_inputs(self) -> bool {
        self == GateLabel::PrepZZ
    }
}

impl fmt::Display for GateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl FromStr for GateLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_LABELS
            .iter()
            .copied()
            .find(|g| g.mnemonic() == s)
            .ok_or_else(|| Error::UnknownGate(s.to_string()))
    }
}

pub fn outcome_space(g: GateLabel) -> Vec<Outcome> {
    g.measurement().into_iter().collect()
}

/// Both outcomes of the measurement family that `g` belongs to.
pub fn outcome_family(g: GateLabel) -> Option<[Outcome; 2]> {
    g.measurement().map(|o| {
        [
            Outcome {
                side: o.side,
                bit: 0,
            },
            Outcome {
                side: o.side,
                bit: 1,
            },
        ]
    })
}

#[derive(Debug, Clone)]
pub struct GateChannel {
    pub kraus_ops: Vec<Matrix4<C64>>,
    pub outcome_label: Option<Outcome>,
    pub absorbs_inputs: bool,
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn hadamard() -> Matrix2<C64> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    Matrix2::new(c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0))
}

pub fn phase(theta: f64) -> Matrix2<C64> {
    Matrix2::new(
        c(1.0, 0.0),
        c(0.0, 0.0),
        c(0.0, 0.0),
        C64::from_polar(1.0, theta),
    )
}

pub fn projector(bit: u8) -> Matrix2<C64> {
    let mut m = Matrix2::zeros();
    m[(bit as usize, bit as usize)] = c(1.0, 0.0);
    m
}

pub fn kron2(a: &Matrix2<C64>, b: &Matrix2<C64>) -> Matrix4<C64> {
    let mut m = Matrix4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    m[(2 * i + k, 2 * j + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    m
}

pub fn cnot() -> Matrix4<C64> {
    let mut m = Matrix4::zeros();
    for (i, j) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
        m[(i, j)] = c(1.0, 0.0);
    }
    m
}

pub fn swap() -> Matrix4<C64> {
    let mut m = Matrix4::zeros();
    for (i, j) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
        m[(i, j)] = c(1.0, 0.0);
    }
    m
}

pub fn channel(g: GateLabel) -> Result<GateChannel> {
    channel_with_phase(g, DEFAULT_R_PHASE)
}

/// Channel with a configurable R-gate phase exponent.
pub fn channel_with_phase(g: GateLabel, r_phase: f64) -> Result<GateChannel> {
    use GateLabel::*;
    let id = Matrix2::<C64>::identity();
    let unitary = |u: Matrix4<C64>| GateChannel {
        kraus_ops: vec![u],
        outcome_label: None,
        absorbs_inputs: false,
    };
    Ok(match g {
        Cnot => unitary(cnot()),
        HI => unitary(kron2(&hadamard(), &id)),
        IH => unitary(kron2(&id, &hadamard())),
        PI => unitary(kron2(&phase(std::f64::consts::FRAC_PI_2), &id)),
        IP => unitary(kron2(&id, &phase(std::f64::consts::FRAC_PI_2))),
        RI => unitary(kron2(&phase(r_phase), &id)),
        IR => unitary(kron2(&id, &phase(r_phase))),
        II => unitary(Matrix4::identity()),
        Swap => unitary(swap()),
        PrepZZ => GateChannel {
            kraus_ops: (0..4)
                .map(|k| {
                    let mut m = Matrix4::zeros();
                    m[(0, k)] = c(1.0, 0.0);
                    m
                })
                .collect(),
            outcome_label: None,
            absorbs_inputs: true,
        },
        M0I | M1I | IM0 | IM1 => {
            let o = g.measurement().unwrap();
            let k = match o.side {
                Side::Left => kron2(&projector(o.bit), &id),
                Side::Right => kron2(&id, &projector(o.bit)),
            };
            GateChannel {
                kraus_ops: vec![k],
                outcome_label: Some(o),
                absorbs_inputs: false,
            }
        }
        Null => return Err(Error::UnknownGate("NULL has no channel".into())),
    })
}
