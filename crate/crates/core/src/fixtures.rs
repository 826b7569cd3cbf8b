//! Small hand-checkable grids and a seeded random radial generator.

use crate::grid::{feeder15 as bundled, RadialGrid};
use crate::rng::Stream;

/// Two-line chain `0 -> 1 -> 2` on a 1 MVA base, so MW equals per-unit.
/// Both load nodes carry a DER of capacity 1 with costs 12 (node 1) and 8 (node 2);
/// the substation costs 10.
pub fn chain3(d1: f64, d2: f64, tan_phi: f64, r: f64, x: f64) -> RadialGrid {
    RadialGrid {
        base_mva: 1.0,
        parent: vec![None, Some(0), Some(1)],
        r: vec![r, r],
        x: vec![x, x],
        f_max: vec![10.0, 10.0],
        d_p: vec![0.0, d1, d2],
        tan_phi: vec![tan_phi; 3],
        g_p_min: vec![0.0; 3],
        g_p_max: vec![10.0, 1.0, 1.0],
        g_q_min: vec![-10.0, -0.5, -0.5],
        g_q_max: vec![10.0, 0.5, 0.5],
        v_min: vec![1.0, 0.9, 0.9],
        v_max: vec![1.0, 1.1, 1.1],
        c: vec![10.0, 12.0, 8.0],
        c2: vec![0.0; 3],
    }
}

/// Substation only.
pub fn single_node() -> RadialGrid {
    RadialGrid {
        base_mva: 1.0,
        parent: vec![None],
        r: vec![],
        x: vec![],
        f_max: vec![],
        d_p: vec![0.0],
        tan_phi: vec![0.5],
        g_p_min: vec![0.0],
        g_p_max: vec![10.0],
        g_q_min: vec![-10.0],
        g_q_max: vec![10.0],
        v_min: vec![1.0],
        v_max: vec![1.0],
        c: vec![10.0],
        c2: vec![0.0],
    }
}

/// Two lines leaving the substation: `0 -> 1`, `0 -> 2`.
pub fn star2() -> RadialGrid {
    let mut g = chain3(1.0, 1.0, 0.5, 0.01, 0.01);
    g.parent = vec![None, Some(0), Some(0)];
    g
}

pub fn feeder15() -> RadialGrid {
    bundled()
}

/// Random radial feeder with `n` nodes and a DER at every load node. Limits are
/// generous enough that the chance-constrained problem stays feasible at
/// 10% load adjacency.
pub fn random_radial(seed: u64, n: usize) -> RadialGrid {
    assert!(n >= 2, "a random feeder needs at least one line");
    let mut rng = Stream::new(seed, 0);
    let base = 10.0;
    let mut parent = vec![None];
    for i in 1..n {
        parent.push(Some(rng.below(i)));
    }
    let lines = n - 1;
    let uni = |rng: &mut Stream, lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
    let r: Vec<f64> = (0..lines).map(|_| uni(&mut rng, 0.0005, 0.002)).collect();
    let x: Vec<f64> = r.iter().map(|r| 2.0 * r).collect();
    let mut d_p = vec![0.0];
    let mut c = vec![10.0 * base];
    for _ in 1..n {
        d_p.push(uni(&mut rng, 0.5, 2.0) / base);
        c.push(uni(&mut rng, 6.0, 14.0) * base);
    }
    let cap = 4.0 / base;
    let mut g_p_max = vec![100.0 / base];
    g_p_max.extend(std::iter::repeat_n(cap, lines));
    let mut g_q_max = vec![100.0 / base];
    g_q_max.extend(std::iter::repeat_n(cap / 2.0, lines));
    let g_q_min = g_q_max.iter().map(|v| -v).collect();
    let mut v_min = vec![1.0];
    v_min.extend(std::iter::repeat_n(0.9, lines));
    let mut v_max = vec![1.0];
    v_max.extend(std::iter::repeat_n(1.1, lines));
    RadialGrid {
        base_mva: base,
        parent,
        r,
        x,
        f_max: vec![100.0 / base; lines],
        d_p,
        tan_phi: vec![0.5; n],
        g_p_min: vec![0.0; n],
        g_p_max,
        g_q_min,
        g_q_max,
        v_min,
        v_max,
        c,
        c2: vec![0.0; n],
    }
}
