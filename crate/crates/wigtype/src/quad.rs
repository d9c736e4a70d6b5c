//! Quadrature building blocks: Gauss–Legendre panels, graded meshes,
//! compensated sums and the logarithmic double integral.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

/// A Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Rule {
    x: Vec<f64>,
    w: Vec<f64>,
}

impl Rule {
    pub fn new(order: usize) -> Self {
        let order = NonZeroUsize::new(order.max(1)).expect("nonzero");
        let gl = GaussLegendre::new(order);
        let (x, w) = gl.as_node_weight_pairs().iter().copied().unzip();
        Rule { x, w }
    }

    pub fn order(&self) -> usize {
        self.x.len()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let c = 0.5 * (b + a);
        self.x.iter().zip(&self.w).map(move |(x, w)| (c + h * x, h * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let mut s = Sum::default();
        for (x, w) in self.on(a, b) {
            s.add(w * f(x));
        }
        s.value()
    }

    /// Composite rule over consecutive breakpoints.
    pub fn composite(&self, breaks: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::with_capacity(breaks.len() * self.order());
        let mut ws = Vec::with_capacity(breaks.len() * self.order());
        for p in breaks.windows(2) {
            if p[1] > p[0] {
                for (x, w) in self.on(p[0], p[1]) {
                    xs.push(x);
                    ws.push(w);
                }
            }
        }
        (xs, ws)
    }

    pub fn integrate_composite<F: FnMut(f64) -> f64>(&self, breaks: &[f64], mut f: F) -> f64 {
        let mut s = Sum::default();
        for p in breaks.windows(2) {
            if p[1] > p[0] {
                s.add(self.integrate(p[0], p[1], &mut f));
            }
        }
        s.value()
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    pub fn add(&mut self, v: f64) {
        let t = self.s + v;
        if self.s.abs() >= v.abs() {
            self.c += (self.s - t) + v;
        } else {
            self.c += (v - t) + self.s;
        }
        self.s = t;
    }

    pub fn value(&self) -> f64 {
        self.s + self.c
    }
}

impl FromIterator<f64> for Sum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Sum::default();
        for v in iter {
            s.add(v);
        }
        s
    }
}

/// Compensated sum of an iterator.
pub fn ksum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<Sum>().value()
}

/// Breakpoints on `[a, b]` geometrically graded toward `p`.
///
/// Each side of `p` is cut at distances `d * ratio^k` for `k < levels`, where
/// `d` is the distance from `p` to that end; the innermost panel touches `p`.
pub fn graded_breaks(a: f64, b: f64, p: f64, ratio: f64, levels: usize) -> Vec<f64> {
    let p = p.clamp(a, b);
    let floor = 1e-13 * (a.abs() + b.abs()).max(1e-300);
    let mut out = vec![a];
    let left = p - a;
    if left > 0.0 {
        for k in 1..levels {
            let d = left * ratio.powi(k as i32);
            if d > floor {
                out.push(p - d);
            }
        }
    }
    if p > a && p < b {
        out.push(p);
    }
    let right = b - p;
    if right > 0.0 {
        for k in (1..levels).rev() {
            let d = right * ratio.powi(k as i32);
            if d > floor {
                out.push(p + d);
            }
        }
    }
    out.push(b);
    out.dedup();
    out
}

/// Merges breakpoint lists into one sorted list, dropping near duplicates.
pub fn merge_breaks(lists: &[Vec<f64>]) -> Vec<f64> {
    let mut all: Vec<f64> = lists.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    all.sort_by(f64::total_cmp);
    let scale = all.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for v in all {
        if out.last().is_none_or(|&l| v - l > 1e-14 * scale) {
            out.push(v);
        }
    }
    out
}

/// Breakpoints of `[a, b]` refined geometrically toward each listed feature point,
/// with `base` uniform panels in between.
pub fn feature_mesh(a: f64, b: f64, features: &[(f64, f64)], base: usize) -> Vec<f64> {
    let mut lists = vec![(0..=base).map(|k| a + (b - a) * k as f64 / base as f64).collect::<Vec<_>>()];
    for &(p, scale) in features {
        if p < a || p > b {
            continue;
        }
        // Panels of width ~scale near p, growing geometrically to O(1).
        let mut d = scale;
        let mut pts = vec![p];
        while d < (b - a) {
            pts.push(p - d);
            pts.push(p + d);
            d *= 1.6;
        }
        lists.push(pts.into_iter().filter(|&x| x > a && x < b).collect());
    }
    merge_breaks(&lists)
}

/// `int_a^b log|x - y| dy`.
pub fn log_moment(x: f64, a: f64, b: f64) -> f64 {
    let xlogx = |d: f64| if d == 0.0 { 0.0 } else { d * d.abs().ln() };
    // Antiderivative of log|x - y| in y is -(x - y) log|x - y| + (x - y).
    let prim = |y: f64| -xlogx(x - y) + (x - y);
    prim(b) - prim(a)
}

/// `int int u(x) u(y) log|x - y| dx dy` for a piecewise-smooth `u` whose
/// non-smooth points are among `breaks`.
pub fn log_double_integral<F: Fn(f64) -> f64 + Sync>(u: F, breaks: &[f64], rule: &Rule) -> f64 {
    log_double_integral2(&u, &u, breaks, rule)
}

/// `int int u(x) v(y) log|x - y| dx dy`.
///
/// The inner integral subtracts `v(x)` and adds back the closed-form log
/// moment; the remainder is integrated on panels graded toward `x`.
pub fn log_double_integral2<F, G>(u: F, v: G, breaks: &[f64], rule: &Rule) -> f64
where
    F: Fn(f64) -> f64 + Sync,
    G: Fn(f64) -> f64 + Sync,
{
    use rayon::prelude::*;
    let (xs, ws) = rule.composite(breaks);
    let lo = breaks[0];
    let hi = *breaks.last().unwrap();
    let inner: Vec<f64> = xs
        .par_iter()
        .map(|&x| {
            let vx = v(x);
            // (v(y) - v(x)) log|x - y| -> 0 as y -> x; nodes may coincide with x in floating point.
            let g = |y: f64| if y == x { 0.0 } else { (v(y) - vx) * (x - y).abs().ln() };
            let mut s = Sum::default();
            for p in breaks.windows(2) {
                let (a, b) = (p[0], p[1]);
                if b <= a {
                    continue;
                }
                let width = b - a;
                if x > a - 0.5 * width && x < b + 0.5 * width {
                    let sub = graded_breaks(a, b, x, 0.15, 20);
                    s.add(rule.integrate_composite(&sub, g));
                } else {
                    s.add(rule.integrate(a, b, g));
                }
            }
            s.add(vx * log_moment(x, lo, hi));
            s.value()
        })
        .collect();
    ksum(xs.iter().zip(&ws).zip(&inner).map(|((&x, &w), &i)| w * u(x) * i))
}

/// Trapezoid rule on sorted samples.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    ksum(x.windows(2).zip(y.windows(2)).map(|(xx, yy)| 0.5 * (xx[1] - xx[0]) * (yy[0] + yy[1])))
}
