use std::fmt;

use serde::{Serialize, Serializer};

use super::FrontierPoint;

/// `a` dominates `b`: no more budget, no less score, strictly better in one.
pub fn dominates(a: &FrontierPoint, b: &FrontierPoint) -> bool {
    a.budget <= b.budget && a.accuracy >= b.accuracy && (a.budget < b.budget || a.accuracy > b.accuracy)
}

/// Non-dominated points sorted by budget. Exact duplicates keep the first.
pub fn pareto_extract(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .budget
            .total_cmp(&points[j].budget)
            .then(points[j].accuracy.total_cmp(&points[i].accuracy))
            .then(i.cmp(&j))
    });
    let mut out: Vec<FrontierPoint> = Vec::new();
    for i in order {
        let p = &points[i];
        match out.last() {
            Some(last) if p.accuracy <= last.accuracy => {}
            _ => out.push(p.clone()),
        }
    }
    out
}

/// Mean vertical gap between two frontiers over their shared budget range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Improvement {
    Value(f64),
    /// Budget ranges do not overlap in an interval of positive length.
    Disjoint,
}

impl Improvement {
    pub fn value(self) -> Option<f64> {
        match self {
            Improvement::Value(v) => Some(v),
            Improvement::Disjoint => None,
        }
    }
}

impl fmt::Display for Improvement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Improvement::Value(v) => write!(f, "{v}"),
            Improvement::Disjoint => f.write_str("NA"),
        }
    }
}

impl Serialize for Improvement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Improvement::Value(v) => s.serialize_f64(*v),
            Improvement::Disjoint => s.serialize_str("NA"),
        }
    }
}

fn interpolate(xs: &[(f64, f64)], x: f64) -> f64 {
    let k = xs.partition_point(|&(b, _)| b <= x);
    if k == 0 {
        return xs[0].1;
    }
    if k == xs.len() {
        return xs[k - 1].1;
    }
    let (x0, y0) = xs[k - 1];
    let (x1, y1) = xs[k];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

fn curve(f: &[FrontierPoint]) -> Vec<(f64, f64)> {
    let mut c: Vec<(f64, f64)> = f.iter().map(|p| (p.budget, p.accuracy)).collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0));
    c
}

/// `∫_I (A(x) - B(x)) dx / |I|` over the largest shared budget interval,
/// with both frontiers linearly interpolated between their points.
pub fn avg_improvement(a: &[FrontierPoint], b: &[FrontierPoint]) -> Improvement {
    if a.is_empty() || b.is_empty() {
        return Improvement::Disjoint;
    }
    let (ca, cb) = (curve(a), curve(b));
    let lo = ca[0].0.max(cb[0].0);
    let hi = ca[ca.len() - 1].0.min(cb[cb.len() - 1].0);
    if !(hi > lo) {
        return Improvement::Disjoint;
    }
    let mut xs: Vec<f64> = ca
        .iter()
        .chain(&cb)
        .map(|&(x, _)| x)
        .filter(|&x| x > lo && x < hi)
        .collect();
    xs.push(lo);
    xs.push(hi);
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let gap = |x: f64| interpolate(&ca, x) - interpolate(&cb, x);
    let mut area = 0.0;
    for seg in xs.windows(2) {
        area += (gap(seg[0]) + gap(seg[1])) * (seg[1] - seg[0]) / 2.0;
    }
    Improvement::Value(area / (hi - lo))
}
