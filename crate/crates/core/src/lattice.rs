//! Octagon/square tesselation of the (site, step) point lattice and the
//! diamond-shaped gate lattice that links neighbouring octagons.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpacetimePoint {
    pub site: usize,
    pub step: usize,
}

impl SpacetimePoint {
    pub fn new(site: usize, step: usize) -> Self {
        SpacetimePoint { site, step }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TesselId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TesselKind {
    Octagon,
    Square,
}

#[derive(Debug, Clone)]
pub struct Tessel {
    pub id: TesselId,
    pub kind: TesselKind,
    /// Centre in signed lattice coordinates `(x, t)`; may lie outside the strip
    /// for partial tessels.
    pub midpoint: (i64, i64),
    /// In-range points, raster order.
    pub points: Vec<SpacetimePoint>,
    /// Index of each point in the full octagon mask (`None` for squares).
    pub positions: Vec<Option<usize>>,
    /// Octagon row and column in the staggered pattern.
    pub row: i64,
    pub col: i64,
    /// True when every point of the tessel's mask lies inside the strip.
    pub interior: bool,
}

impl Tessel {
    pub fn is_gate_site(&self) -> bool {
        self.kind == TesselKind::Octagon && self.interior
    }

    pub fn last_point(&self) -> SpacetimePoint {
        *self.points.last().expect("tessels are never empty")
    }

    pub fn first_step(&self) -> usize {
        self.points[0].step
    }
}

#[derive(Debug, Clone)]
pub struct Tesselation {
    pub l_sites: usize,
    pub t_steps: usize,
    pub period_x: usize,
    pub period_t: usize,
    pub corner_cut: usize,
    tessels: Vec<Tessel>,
    table: Vec<TesselId>,
    point_pos: Vec<Option<usize>>,
    mask: Vec<(i64, i64)>,
    by_midpoint: HashMap<(i64, i64), TesselId>,
}

fn in_mask(dx: i64, dt: i64, px: i64, pt: i64, c: i64) -> bool {
    if dx.abs() > px / 2 - c || dt.abs() > pt / 2 - c {
        return false;
    }
    let s = dx.abs() * pt + dt.abs() * px;
    let half = px * pt / 2;
    s < half || (s == half && dt < 0)
}

pub fn build_tesselation(
    l_sites: usize,
    t_steps: usize,
    period_x: usize,
    period_t: usize,
    corner_cut: usize,
) -> Result<Tesselation> {
    if period_x < 4 || period_t < 4 || !period_x.is_multiple_of(2) || !period_t.is_multiple_of(2) {
        return Err(Error::InvalidGeometry(format!(
            "periods must be even and >= 4 (got {period_x}x{period_t})"
        )));
    }
    if corner_cut < 1 || 2 * corner_cut >= period_x.min(period_t) {
        return Err(Error::InvalidGeometry(format!(
            "corner cut {corner_cut} must satisfy 1 <= c and 2c < {}",
            period_x.min(period_t)
        )));
    }
    if l_sites < period_x || t_steps < period_t {
        return Err(Error::InvalidGeometry(format!(
            "region {l_sites}x{t_steps} smaller than one tessel {period_x}x{period_t}"
        )));
    }
    let (px, pt, c) = (period_x as i64, period_t as i64, corner_cut as i64);
    let (hx, ht) = (px / 2, pt / 2);
    let (lx, lt) = (l_sites as i64, t_steps as i64);

    let mut mask = Vec::new();
    for dt in -ht..=ht {
        for dx in -hx..=hx {
            if in_mask(dx, dt, px, pt, c) {
                mask.push((dx, dt));
            }
        }
    }

    let n = l_sites * t_steps;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut point_pos: Vec<Option<usize>> = vec![None; n];
    let mut raw: Vec<Tessel> = Vec::new();

    let rows = lt / ht + 2;
    let cols = lx / px + 2;
    for r in -1..=rows {
        let ct = ht + r * ht;
        let shift = if r.rem_euclid(2) == 1 { hx } else { 0 };
        for j in -1..=cols {
            let cx = hx + j * px + shift;
            let mut pts = Vec::new();
            let mut poss = Vec::new();
            for (k, &(dx, dt)) in mask.iter().enumerate() {
                let (x, t) = (cx + dx, ct + dt);
                if x >= 0 && x < lx && t >= 0 && t < lt {
                    pts.push(SpacetimePoint::new(x as usize, t as usize));
                    poss.push(Some(k));
                }
            }
            if pts.is_empty() {
                continue;
            }
            let interior = pts.len() == mask.len();
            let idx = raw.len();
            for (p, k) in pts.iter().zip(&poss) {
                let i = p.step * l_sites + p.site;
                debug_assert!(owner[i].is_none());
                owner[i] = Some(idx);
                point_pos[i] = *k;
            }
            raw.push(Tessel {
                id: TesselId(idx),
                kind: TesselKind::Octagon,
                midpoint: (cx, ct),
                points: pts,
                positions: poss,
                row: r,
                col: j,
                interior,
            });
        }
    }

    // Remaining points belong to the square around the nearest octagon tip.
    let mut squares: HashMap<(i64, i64), usize> = HashMap::new();
    for t in 0..lt {
        for x in 0..lx {
            let i = (t * lx + x) as usize;
            if owner[i].is_some() {
                continue;
            }
            let r0 = (t - ht).div_euclid(ht);
            // (sort key, midpoint, row, column)
            type Candidate = ((i64, i64, i64), (i64, i64), i64, i64);
            let mut best: Option<Candidate> = None;
            for r in r0 - 1..=r0 + 2 {
                let ct = ht + r * ht;
                let shift = if r.rem_euclid(2) == 1 { hx } else { 0 };
                let j0 = (x - px - shift).div_euclid(px);
                for j in j0 - 1..=j0 + 2 {
                    let cx = px + j * px + shift;
                    let d = (x - cx).abs() * pt + (t - ct).abs() * px;
                    let key = (d, -ct, -cx);
                    if best.is_none_or(|b| key < b.0) {
                        best = Some((key, (cx, ct), r, j));
                    }
                }
            }
            let (_, centre, r, j) = best.expect("candidate set is non-empty");
            let idx = *squares.entry(centre).or_insert_with(|| {
                raw.push(Tessel {
                    id: TesselId(raw.len()),
                    kind: TesselKind::Square,
                    midpoint: centre,
                    points: Vec::new(),
                    positions: Vec::new(),
                    row: r,
                    col: j,
                    interior: false,
                });
                raw.len() - 1
            });
            raw[idx]
                .points
                .push(SpacetimePoint::new(x as usize, t as usize));
            raw[idx].positions.push(None);
            owner[i] = Some(idx);
        }
    }
    // Renumber tessels by (first step, first site) so ids follow raster order.
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by_key(|&i| (raw[i].points[0].step, raw[i].points[0].site));
    let mut remap = vec![0usize; raw.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let mut tessels: Vec<Tessel> = order.iter().map(|&i| raw[i].clone()).collect();
    for (k, t) in tessels.iter_mut().enumerate() {
        t.id = TesselId(k);
    }
    let table: Vec<TesselId> = owner
        .iter()
        .map(|o| TesselId(remap[o.expect("every point is owned")]))
        .collect();
    let by_midpoint = tessels
        .iter()
        .filter(|t| t.kind == TesselKind::Octagon)
        .map(|t| (t.midpoint, t.id))
        .collect();

    Ok(Tesselation {
        l_sites,
        t_steps,
        period_x,
        period_t,
        corner_cut,
        tessels,
        table,
        point_pos,
        mask,
        by_midpoint,
    })
}

impl Tesselation {
    pub fn tessels(&self) -> &[Tessel] {
        &self.tessels
    }

    pub fn tessel(&self, id: TesselId) -> &Tessel {
        &self.tessels[id.0]
    }

    /// Mask offsets `(dx, dt)` of a full octagon in raster order.
    pub fn octagon_mask(&self) -> &[(i64, i64)] {
        &self.mask
    }

    pub fn octagon_size(&self) -> usize {
        self.mask.len()
    }

    pub fn n_points(&self) -> usize {
        self.l_sites * self.t_steps
    }

    pub fn tessel_of(&self, p: SpacetimePoint) -> Result<TesselId> {
        if p.site >= self.l_sites || p.step >= self.t_steps {
            return Err(Error::OutOfRange {
                site: p.site as i64,
                step: p.step as i64,
            });
        }
        Ok(self.table[p.step * self.l_sites + p.site])
    }

    /// Mask index of a point within its octagon, `None` on squares.
    pub fn position_of(&self, p: SpacetimePoint) -> Option<usize> {
        self.point_pos[p.step * self.l_sites + p.site]
    }

    pub fn octagon_at(&self, x: i64, t: i64) -> Option<TesselId> {
        self.by_midpoint.get(&(x, t)).copied()
    }

    /// Interior octagons, the only tessels that can carry UGS gates.
    pub fn gate_sites(&self) -> impl Iterator<Item = &Tessel> {
        self.tessels.iter().filter(|t| t.is_gate_site())
    }

    pub fn export_grid(&self) -> String {
        let mut s = String::new();
        for n in 0..self.t_steps {
            let row: Vec<String> = (0..self.l_sites)
                .map(|l| self.table[n * self.l_sites + l].0.to_string())
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Adjacency {
    pub lower_left_parent: Option<TesselId>,
    pub lower_right_parent: Option<TesselId>,
    pub upper_left_child: Option<TesselId>,
    pub upper_right_child: Option<TesselId>,
}

#[derive(Debug, Clone)]
pub struct GateLattice {
    adj: Vec<Option<Adjacency>>,
}

impl GateLattice {
    pub fn get(&self, id: TesselId) -> Option<&Adjacency> {
        self.adj.get(id.0).and_then(|a| a.as_ref())
    }

    pub fn is_gate_site(&self, id: TesselId) -> bool {
        self.get(id).is_some()
    }
}

pub fn gate_adjacency(tess: &Tesselation) -> GateLattice {
    let hx = (tess.period_x / 2) as i64;
    let ht = (tess.period_t / 2) as i64;
    let mut adj = vec![None; tess.tessels.len()];
    let gate = |x: i64, t: i64| {
        tess.octagon_at(x, t)
            .filter(|id| tess.tessel(*id).is_gate_site())
    };
    for t in tess.gate_sites() {
        let (cx, ct) = t.midpoint;
        adj[t.id.0] = Some(Adjacency {
            lower_left_parent: gate(cx - hx, ct - ht),
            lower_right_parent: gate(cx + hx, ct - ht),
            upper_left_child: gate(cx - hx, ct + ht),
            upper_right_child: gate(cx + hx, ct + ht),
        });
    }
    GateLattice { adj }
}
