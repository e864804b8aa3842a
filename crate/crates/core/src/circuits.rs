//! Fragments, closure validation, random circuit generation and the circuit
//! text format.

use crate::error::{Error, Result};
use crate::gates::{GateLabel, Outcome, Side, UGS};
use crate::lattice::{GateLattice, TesselId, Tesselation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Lower edge of an octagon: the input entering on `side`.
pub type Edge = (TesselId, Side);

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Fragment {
    pub assignments: BTreeMap<TesselId, GateLabel>,
}

impl Fragment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (TesselId, GateLabel)>) -> Self {
        Fragment {
            assignments: pairs.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn get(&self, id: TesselId) -> Option<GateLabel> {
        self.assignments.get(&id).copied()
    }

    pub fn insert(&mut self, id: TesselId, g: GateLabel) {
        self.assignments.insert(id, g);
    }

    pub fn region(&self) -> Vec<TesselId> {
        self.assignments.keys().copied().collect()
    }

    /// Union of two fragments on disjoint regions.
    pub fn union(&self, other: &Fragment) -> Result<Fragment> {
        let mut out = self.clone();
        for (&id, &g) in &other.assignments {
            if out.assignments.insert(id, g).is_some() {
                return Err(Error::InvalidCircuit(format!(
                    "regions overlap at tessel {}",
                    id.0
                )));
            }
        }
        Ok(out)
    }

    /// Octagons in temporal layer order (midpoint t, then x).
    pub fn layer_order(&self, tess: &Tesselation) -> Vec<(TesselId, GateLabel)> {
        let mut v: Vec<_> = self.assignments.iter().map(|(&i, &g)| (i, g)).collect();
        v.sort_by_key(|(i, _)| {
            let (x, t) = tess.tessel(*i).midpoint;
            (t, x)
        });
        v
    }

    pub fn measurement_count(&self) -> usize {
        self.assignments
            .values()
            .filter(|g| g.is_measurement())
            .count()
    }
}

/// Producer of the wire entering `id` on `side`, if it is assigned in `f`.
pub fn feeder(f: &Fragment, gl: &GateLattice, id: TesselId, side: Side) -> Option<TesselId> {
    let a = gl.get(id)?;
    let p = match side {
        Side::Left => a.lower_left_parent,
        Side::Right => a.lower_right_parent,
    }?;
    f.assignments.contains_key(&p).then_some(p)
}

/// Consumer of the wire leaving `id` on `side`, if it is assigned in `f`.
pub fn consumer(f: &Fragment, gl: &GateLattice, id: TesselId, side: Side) -> Option<TesselId> {
    let a = gl.get(id)?;
    let c = match side {
        Side::Left => a.upper_left_child,
        Side::Right => a.upper_right_child,
    }?;
    f.assignments.contains_key(&c).then_some(c)
}

pub fn open_inputs(f: &Fragment, gl: &GateLattice) -> Vec<Edge> {
    let mut v = Vec::new();
    for &id in f.assignments.keys() {
        for side in [Side::Left, Side::Right] {
            if feeder(f, gl, id, side).is_none() {
                v.push((id, side));
            }
        }
    }
    v
}

/// Upper edges not consumed by another assigned octagon.
pub fn open_outputs(f: &Fragment, gl: &GateLattice) -> Vec<Edge> {
    let mut v = Vec::new();
    for &id in f.assignments.keys() {
        for side in [Side::Left, Side::Right] {
            if consumer(f, gl, id, side).is_none() {
                v.push((id, side));
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Circuit {
    pub fragment: Fragment,
    pub outcome_assignment: BTreeMap<TesselId, Outcome>,
}

impl Circuit {
    pub fn gates(&self) -> &BTreeMap<TesselId, GateLabel> {
        &self.fragment.assignments
    }

    pub fn len(&self) -> usize {
        self.fragment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragment.is_empty()
    }
}

/// Open inputs that are neither absorbed nor shunted.
pub fn closure_violations(f: &Fragment, gl: &GateLattice) -> Vec<Edge> {
    open_inputs(f, gl)
        .into_iter()
        .filter(|&(id, side)| {
            let g = f.assignments[&id];
            let shunted = g.identity_on(side) && consumer(f, gl, id, side).is_none();
            !(g.absorbs_inputs() || shunted)
        })
        .collect()
}

pub fn validate_circuit(f: &Fragment, gl: &GateLattice) -> Result<Circuit> {
    for (&id, &g) in &f.assignments {
        if !gl.is_gate_site(id) {
            return Err(Error::InvalidCircuit(format!(
                "tessel {} is not an interior octagon",
                id.0
            )));
        }
        if g == GateLabel::Null {
            return Err(Error::InvalidCircuit(format!(
                "NULL assigned to tessel {}",
                id.0
            )));
        }
    }
    let bad = closure_violations(f, gl);
    if !bad.is_empty() {
        let list: Vec<String> = bad
            .iter()
            .map(|(id, s)| format!("{}:{}", id.0, s.name()))
            .collect();
        return Err(Error::InvalidCircuit(format!(
            "unguarded open inputs {}",
            list.join(", ")
        )));
    }
    let outcome_assignment = f
        .assignments
        .iter()
        .filter_map(|(&id, g)| g.measurement().map(|o| (id, o)))
        .collect();
    Ok(Circuit {
        fragment: f.clone(),
        outcome_assignment,
    })
}

pub fn is_valid(f: &Fragment, gl: &GateLattice) -> bool {
    closure_violations(f, gl).is_empty()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    OutsideIn,
    GrowFromPrep,
}

#[derive(Debug, Clone)]
pub struct RandomCircuitConfig {
    pub strategy: Strategy,
    pub mean_gate_count: f64,
    /// Box origin and extent in lattice points.
    pub origin: (usize, usize),
    pub extent: (usize, usize),
    pub seed: u64,
    pub max_retries: usize,
}

impl RandomCircuitConfig {
    pub fn whole(tess: &Tesselation, strategy: Strategy, mean: f64, seed: u64) -> Self {
        RandomCircuitConfig {
            strategy,
            mean_gate_count: mean,
            origin: (0, 0),
            extent: (tess.l_sites, tess.t_steps),
            seed,
            max_retries: 10_000,
        }
    }
}

/// Interior octagons whose every point lies inside the box.
pub fn box_sites(
    tess: &Tesselation,
    origin: (usize, usize),
    extent: (usize, usize),
) -> Vec<TesselId> {
    let (x0, t0) = origin;
    let (x1, t1) = (x0 + extent.0, t0 + extent.1);
    tess.gate_sites()
        .filter(|t| {
            t.points
                .iter()
                .all(|p| p.site >= x0 && p.site < x1 && p.step >= t0 && p.step < t1)
        })
        .map(|t| t.id)
        .collect()
}

/// Seeded generator of random valid circuits.
pub struct CircuitSampler {
    cfg: RandomCircuitConfig,
    sites: Vec<TesselId>,
    rng: ChaCha8Rng,
}

impl CircuitSampler {
    pub fn new(cfg: RandomCircuitConfig, tess: &Tesselation) -> Result<Self> {
        if cfg.mean_gate_count < 1.0 || !cfg.mean_gate_count.is_finite() {
            return Err(Error::Config(format!(
                "mean gate count {} must be >= 1",
                cfg.mean_gate_count
            )));
        }
        if cfg.origin.0 + cfg.extent.0 > tess.l_sites || cfg.origin.1 + cfg.extent.1 > tess.t_steps
        {
            return Err(Error::Config("circuit box exceeds the tesselation".into()));
        }
        let sites = box_sites(tess, cfg.origin, cfg.extent);
        if sites.is_empty() {
            return Err(Error::Config("circuit box holds no octagon".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(CircuitSampler { cfg, sites, rng })
    }

    fn target_count(&mut self) -> usize {
        let q = 1.0 / self.cfg.mean_gate_count;
        loop {
            let mut n = 1;
            while self.rng.gen::<f64>() >= q {
                n += 1;
            }
            if n <= self.sites.len() {
                return n;
            }
        }
    }

    pub fn sample(&mut self, gl: &GateLattice) -> Result<Circuit> {
        let n = self.target_count();
        self.sample_with_count(n, gl)
    }

    pub fn sample_with_count(&mut self, n: usize, gl: &GateLattice) -> Result<Circuit> {
        for _ in 0..self.cfg.max_retries {
            let f = match self.cfg.strategy {
                Strategy::GrowFromPrep => self.grow(n, gl),
                Strategy::OutsideIn => self.outside_in(n, gl),
            };
            if let Some(f) = f {
                return validate_circuit(&f, gl);
            }
        }
        Err(Error::RetryExhausted(self.cfg.max_retries))
    }

    fn random_gate(&mut self) -> GateLabel {
        UGS[self.rng.gen_range(0..UGS.len())]
    }

    fn grow(&mut self, n: usize, gl: &GateLattice) -> Option<Fragment> {
        let mut f = Fragment::new();
        while f.len() < n {
            let free: Vec<TesselId> = self
                .sites
                .iter()
                .copied()
                .filter(|s| !f.assignments.contains_key(s))
                .collect();
            if free.is_empty() {
                return None;
            }
            let frontier: Vec<TesselId> = free
                .iter()
                .copied()
                .filter(|&s| {
                    feeder(&f, gl, s, Side::Left).is_some()
                        || feeder(&f, gl, s, Side::Right).is_some()
                })
                .collect();
            let mut placed = false;
            for _ in 0..32 {
                let (site, g) = if frontier.is_empty() || self.rng.gen::<f64>() < 0.25 {
                    (free[self.rng.gen_range(0..free.len())], GateLabel::PrepZZ)
                } else {
                    let s = frontier[self.rng.gen_range(0..frontier.len())];
                    (s, self.random_gate())
                };
                f.insert(site, g);
                if is_valid(&f, gl) {
                    placed = true;
                    break;
                }
                f.assignments.remove(&site);
            }
            if !placed {
                return None;
            }
        }
        Some(f)
    }

    fn outside_in(&mut self, n: usize, gl: &GateLattice) -> Option<Fragment> {
        let core = self.rng.gen_range(1..=n.div_ceil(2)).min(self.sites.len());
        let mut f = Fragment::new();
        while f.len() < core {
            let s = self.sites[self.rng.gen_range(0..self.sites.len())];
            if !f.assignments.contains_key(&s) {
                let g = self.random_gate();
                f.insert(s, g);
            }
        }
        // Close each unguarded input with a preparation at its feeding site.
        for _ in 0..n + 4 {
            let bad = closure_violations(&f, gl);
            if bad.is_empty() {
                break;
            }
            let (id, side) = bad[0];
            let a = gl.get(id)?;
            let parent = match side {
                Side::Left => a.lower_left_parent,
                Side::Right => a.lower_right_parent,
            }?;
            if !self.sites.contains(&parent) {
                return None;
            }
            f.insert(parent, GateLabel::PrepZZ);
        }
        if !is_valid(&f, gl) || f.len() > n {
            return None;
        }
        // Pad with gates on open outputs while staying closed.
        let mut stalls = 0;
        while f.len() < n && stalls < 64 {
            let outs = open_outputs(&f, gl);
            let children: Vec<TesselId> = outs
                .iter()
                .filter_map(|&(id, side)| {
                    let a = gl.get(id)?;
                    match side {
                        Side::Left => a.upper_left_child,
                        Side::Right => a.upper_right_child,
                    }
                })
                .filter(|c| self.sites.contains(c) && !f.assignments.contains_key(c))
                .collect();
            if children.is_empty() {
                return None;
            }
            let c = children[self.rng.gen_range(0..children.len())];
            let g = self.random_gate();
            f.insert(c, g);
            if !is_valid(&f, gl) {
                f.assignments.remove(&c);
                stalls += 1;
            }
        }
        (f.len() == n).then_some(f)
    }
}

pub fn random_circuit(
    cfg: &RandomCircuitConfig,
    tess: &Tesselation,
    gl: &GateLattice,
) -> Result<Circuit> {
    CircuitSampler::new(cfg.clone(), tess)?.sample(gl)
}

pub fn write_circuit(c: &Circuit, tess: &Tesselation) -> String {
    write_fragment(&c.fragment, tess)
}

pub fn write_fragment(f: &Fragment, tess: &Tesselation) -> String {
    let mut s = String::from("circuit v1\n");
    let _ = writeln!(
        s,
        "tesselation {} {} {} {} {}",
        tess.l_sites, tess.t_steps, tess.period_x, tess.period_t, tess.corner_cut
    );
    for (id, g) in f.layer_order(tess) {
        let (x, t) = tess.tessel(id).midpoint;
        match g.measurement() {
            Some(o) => {
                let _ = writeln!(s, "{x} {t} {g} {o}");
            }
            None => {
                let _ = writeln!(s, "{x} {t} {g}");
            }
        }
    }
    s
}

/// Tesselation parameters `(L, T, Px, Pt, c)` from a circuit file header.
pub fn read_header(text: &str) -> Result<[usize; 5]> {
    let mut lines = content_lines(text);
    let (ln, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    if first != "circuit v1" {
        return Err(Error::Parse {
            line: ln,
            msg: format!("bad header `{first}`"),
        });
    }
    let (ln, second) = lines.next().ok_or(Error::Parse {
        line: ln + 1,
        msg: "missing tesselation line".into(),
    })?;
    let parts: Vec<&str> = second.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "tesselation" {
        return Err(Error::Parse {
            line: ln,
            msg: "expected `tesselation L T Px Pt c`".into(),
        });
    }
    let mut out = [0usize; 5];
    for (k, p) in parts[1..].iter().enumerate() {
        out[k] = p.parse().map_err(|_| Error::Parse {
            line: ln,
            msg: format!("bad integer `{p}`"),
        })?;
    }
    Ok(out)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn read_circuit(text: &str, tess: &Tesselation, gl: &GateLattice) -> Result<Circuit> {
    let f = read_fragment(text, tess)?;
    validate_circuit(&f, gl)
}

pub fn read_fragment(text: &str, tess: &Tesselation) -> Result<Fragment> {
    let hdr = read_header(text)?;
    let want = [
        tess.l_sites,
        tess.t_steps,
        tess.period_x,
        tess.period_t,
        tess.corner_cut,
    ];
    if hdr != want {
        return Err(Error::Parse {
            line: 2,
            msg: format!("tesselation {hdr:?} does not match {want:?}"),
        });
    }
    let mut f = Fragment::new();
    for (ln, line) in content_lines(text).skip(2) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 3 || parts.len() > 4 {
            return Err(Error::Parse {
                line: ln,
                msg: "expected `x t GATE [outcome]`".into(),
            });
        }
        let num = |s: &str| -> Result<i64> {
            s.parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad integer `{s}`"),
            })
        };
        let (x, t) = (num(parts[0])?, num(parts[1])?);
        let g: GateLabel = parts[2].parse().map_err(|e: Error| Error::Parse {
            line: ln,
            msg: e.to_string(),
        })?;
        match (g.measurement(), parts.get(3)) {
            (Some(o), Some(tok)) => {
                let given: Outcome = tok.parse().map_err(|e: Error| Error::Parse {
                    line: ln,
                    msg: e.to_string(),
                })?;
                if given != o {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("outcome {given} contradicts {g}"),
                    });
                }
            }
            (Some(_), None) => {}
            (None, Some(tok)) => {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("gate {g} has no outcome `{tok}`"),
                })
            }
            (None, None) => {}
        }
        let id = tess.octagon_at(x, t).ok_or(Error::Parse {
            line: ln,
            msg: format!("no octagon centred at ({x}, {t})"),
        })?;
        if f.assignments.insert(id, g).is_some() {
            return Err(Error::Parse {
                line: ln,
                msg: format!("octagon ({x}, {t}) assigned twice"),
            });
        }
    }
    Ok(f)
}
