use proptest::prelude::*;
use std::collections::HashSet;
use stuffml::lattice::*;

fn check_partition(t: &Tesselation) {
    let mut seen = HashSet::new();
    let mut total = 0;
    for tsl in t.tessels() {
        for w in tsl.points.windows(2) {
            assert!(
                (w[0].step, w[0].site) < (w[1].step, w[1].site),
                "raster order"
            );
        }
        for p in &tsl.points {
            assert!(seen.insert(*p), "duplicate point {p:?}");
            assert_eq!(t.tessel_of(*p).unwrap(), tsl.id);
        }
        total += tsl.points.len();
    }
    assert_eq!(total, t.l_sites * t.t_steps);
}

#[test]
fn partition_of_twelve_by_twelve() {
    let t = build_tesselation(12, 12, 6, 6, 1).unwrap();
    check_partition(&t);
    let sizes: HashSet<usize> = t.gate_sites().map(|o| o.points.len()).collect();
    assert_eq!(sizes.len(), 1);
}

#[test]
fn single_period_has_one_interior_octagon() {
    let t = build_tesselation(6, 6, 6, 6, 1).unwrap();
    assert_eq!(t.gate_sites().count(), 1);
    let o = t.gate_sites().next().unwrap();
    assert_eq!(o.midpoint, (3, 3));
}

#[test]
fn shared_edge_goes_to_upper_octagon() {
    let t = build_tesselation(12, 12, 6, 6, 1).unwrap();
    let upper = t.octagon_at(6, 6).unwrap();
    // (4, 5) sits on the slanted edge shared by the octagons at (3, 3) and (6, 6).
    assert_eq!(t.tessel_of(SpacetimePoint::new(4, 5)).unwrap(), upper);
}

#[test]
fn midpoint_maps_to_its_octagon() {
    let t = build_tesselation(16, 16, 4, 4, 1).unwrap();
    for o in t.gate_sites() {
        let (x, s) = o.midpoint;
        assert_eq!(
            t.tessel_of(SpacetimePoint::new(x as usize, s as usize))
                .unwrap(),
            o.id
        );
    }
}

#[test]
fn squares_fill_the_tips() {
    let t = build_tesselation(8, 8, 4, 4, 1).unwrap();
    let sq = t.tessel_of(SpacetimePoint::new(4, 2)).unwrap();
    assert_eq!(t.tessel(sq).kind, TesselKind::Square);
    assert_eq!(t.tessel(sq).points.len(), 1);
}

#[test]
fn adjacency_is_an_involution() {
    let t = build_tesselation(20, 20, 4, 4, 1).unwrap();
    let gl = gate_adjacency(&t);
    for o in t.gate_sites() {
        let a = gl.get(o.id).unwrap();
        if let Some(c) = a.upper_left_child {
            assert_eq!(gl.get(c).unwrap().lower_right_parent, Some(o.id));
        }
        if let Some(c) = a.upper_right_child {
            assert_eq!(gl.get(c).unwrap().lower_left_parent, Some(o.id));
        }
        if let Some(p) = a.lower_left_parent {
            assert_eq!(gl.get(p).unwrap().upper_right_child, Some(o.id));
        }
        let (x, s) = o.midpoint;
        let inner = (4..=16).contains(&x) && (4..=16).contains(&s);
        if inner {
            assert!(a.lower_left_parent.is_some() && a.lower_right_parent.is_some());
            assert!(a.upper_left_child.is_some() && a.upper_right_child.is_some());
        }
    }
}

#[test]
fn top_row_has_no_children() {
    let t = build_tesselation(12, 12, 4, 4, 1).unwrap();
    let gl = gate_adjacency(&t);
    let top = t.gate_sites().map(|o| o.midpoint.1).max().unwrap();
    for o in t.gate_sites().filter(|o| o.midpoint.1 == top) {
        let a = gl.get(o.id).unwrap();
        assert!(a.upper_left_child.is_none() && a.upper_right_child.is_none());
    }
}

#[test]
fn two_preparation_drawing_wiring() {
    // Eight octagons over four rows; expected links read off the drawing.
    let t = build_tesselation(18, 15, 6, 6, 1).unwrap();
    let gl = gate_adjacency(&t);
    let id = |x, s| t.octagon_at(x, s).unwrap();
    let (a, b, c, d) = (id(9, 3), id(15, 3), id(6, 6), id(12, 6));
    let (e, h, f, g) = (id(9, 9), id(15, 9), id(6, 12), id(12, 12));
    for o in [a, b, c, d, e, h, f, g] {
        assert!(gl.is_gate_site(o));
    }
    let adj = |o| *gl.get(o).unwrap();
    assert_eq!(adj(a).upper_left_child, Some(c));
    assert_eq!(adj(a).upper_right_child, Some(d));
    assert_eq!(adj(b).upper_left_child, Some(d));
    assert_eq!(adj(b).upper_right_child, None);
    assert_eq!(adj(c).upper_right_child, Some(e));
    assert_eq!(adj(d).upper_left_child, Some(e));
    assert_eq!(adj(d).upper_right_child, Some(h));
    assert_eq!(adj(e).upper_left_child, Some(f));
    assert_eq!(adj(e).upper_right_child, Some(g));
    assert_eq!(adj(h).upper_left_child, Some(g));
}

#[test]
fn grid_export_has_one_row_per_step() {
    let t = build_tesselation(8, 10, 4, 4, 1).unwrap();
    let g = t.export_grid();
    assert_eq!(g.lines().count(), 10);
    assert!(g.lines().all(|l| l.split(' ').count() == 8));
}

proptest! {
    #[test]
    fn any_valid_geometry_partitions(
        hx in 2usize..5, ht in 2usize..5, c in 1usize..3, ex in 0usize..7, et in 0usize..7
    ) {
        let (px, pt) = (2 * hx, 2 * ht);
        prop_assume!(2 * c < px.min(pt));
        let t = build_tesselation(px + ex, pt + et, px, pt, c).unwrap();
        check_partition(&t);
        let sizes: HashSet<usize> = t.gate_sites().map(|o| o.points.len()).collect();
        prop_assert!(sizes.len() <= 1);
    }
}
