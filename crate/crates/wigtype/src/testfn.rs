//! Test functions for linear spectral statistics and their quasi-analytic extensions.
//!
//! Every kind is a closed-form piecewise polynomial or integrated Cauchy profile,
//! so `f`, `f'` and `f''` are exact and the breakpoints are known.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{self, Rule};

/// Septic smoothstep `35u^4 - 84u^5 + 70u^6 - 20u^7`, three continuous derivatives at both ends.
pub fn smoothstep(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u.powi(4) * (35.0 + u * (-84.0 + u * (70.0 - 20.0 * u)))
    }
}

pub fn smoothstep_d1(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        140.0 * (u * (1.0 - u)).powi(3)
    }
}

pub fn smoothstep_d2(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        420.0 * (u * (1.0 - u)).powi(2) * (1.0 - 2.0 * u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// `f = 0`.
    Zero,
    /// Compact bump `(1 - u^2)^4`, `u = (x - E0) / t`.
    Regular,
    /// Integrated Cauchy ramp of scale `t` cut off at `|x - E0| = tM`, plateau at 1,
    /// smoothstep descent of width `c'` centred at `E1`.
    HalfRegularBump,
    /// Smoothstep ramp on `[E0 - t, E0 + t]`, plateau, smoothstep descent at `E1`.
    MollifiedStep,
}

fn default_m() -> f64 {
    1.0
}

fn default_big_c() -> f64 {
    10.0
}

fn default_l_star() -> f64 {
    10.0
}

/// Serialized form of a test function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    pub kind: Kind,
    #[serde(default)]
    pub t: f64,
    #[serde(rename = "M", default = "default_m")]
    pub m: f64,
    #[serde(rename = "E0", default)]
    pub e0: f64,
    #[serde(rename = "E1", default)]
    pub e1: f64,
    /// Width `c'` of the descent.
    #[serde(rename = "cprime", default)]
    pub c_small: f64,
    /// Envelope constant `C'`.
    #[serde(rename = "Cprime", default = "default_big_c")]
    pub c_big: f64,
    /// Domain constant `L_*`; the cutoff `chi` equals 1 for `|y| < 2 L_*`.
    #[serde(default = "default_l_star")]
    pub l_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TestFunctionSpec", into = "TestFunctionSpec")]
pub struct TestFunction {
    spec: TestFunctionSpec,
    /// Normalization of the Cauchy ramp so that it rises by exactly 1.
    amp: f64,
    /// Integral of the unnormalized ramp density over one transition window.
    window_mass: f64,
}

impl From<TestFunction> for TestFunctionSpec {
    fn from(f: TestFunction) -> Self {
        f.spec
    }
}

impl TryFrom<TestFunctionSpec> for TestFunction {
    type Error = Error;

    fn try_from(spec: TestFunctionSpec) -> Result<Self> {
        TestFunction::new(spec)
    }
}

/// Breakpoints and panel counts for the ramp transition integrals.
const WINDOW_PANELS: usize = 4;

impl TestFunction {
    pub fn new(spec: TestFunctionSpec) -> Result<Self> {
        let bad = |what: &str| Err(Error::DataContractViolation(what.to_string()));
        let finite = [spec.t, spec.m, spec.e0, spec.e1, spec.c_small, spec.c_big, spec.l_star];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("test-function data must be finite");
        }
        if spec.kind != Kind::Zero && !(spec.t > 0.0) {
            return bad("t > 0");
        }
        if !(spec.l_star > 0.0) {
            return bad("L_* > 0");
        }
        if matches!(spec.kind, Kind::HalfRegularBump | Kind::MollifiedStep) {
            if !(spec.c_small > 0.0) {
                return bad("c' > 0");
            }
            if spec.kind == Kind::HalfRegularBump && !(spec.m >= 1.0) {
                return bad("M >= 1");
            }
        }
        let mut f = TestFunction { spec, amp: 0.0, window_mass: 0.0 };
        if f.spec.kind == Kind::HalfRegularBump {
            let (t, m) = (f.spec.t, f.spec.m);
            let rule = Rule::new(20);
            let breaks: Vec<f64> = (0..=WINDOW_PANELS)
                .map(|k| 0.5 * t * m * (1.0 + k as f64 / WINDOW_PANELS as f64))
                .collect();
            let w = rule.integrate_composite(&breaks, |d| t / (d * d + t * t) * cutoff(d / (t * m)));
            f.window_mass = w;
            f.amp = 1.0 / (2.0 * (0.5 * m).atan() + 2.0 * w);
        }
        Ok(f)
    }

    pub fn zero() -> Self {
        Self::new(TestFunctionSpec {
            kind: Kind::Zero,
            t: 0.0,
            m: 1.0,
            e0: 0.0,
            e1: 0.0,
            c_small: 0.0,
            c_big: default_big_c(),
            l_star: default_l_star(),
        })
        .expect("zero test function")
    }

    pub fn regular(e0: f64, t: f64) -> Result<Self> {
        Self::new(TestFunctionSpec {
            kind: Kind::Regular,
            t,
            m: 1.0,
            e0,
            e1: e0,
            c_small: 0.0,
            c_big: default_big_c(),
            l_star: default_l_star(),
        })
    }

    /// Half-regular bump; run [`TestFunction::validate`] to check the data contract.
    pub fn half_regular_bump(t: f64, m: f64, e0: f64, e1: f64, c_small: f64, c_big: f64) -> Result<Self> {
        Self::new(TestFunctionSpec {
            kind: Kind::HalfRegularBump,
            t,
            m,
            e0,
            e1,
            c_small,
            c_big,
            l_star: default_l_star(),
        })
    }

    pub fn mollified_step(t: f64, e0: f64, e1: f64, c_small: f64) -> Result<Self> {
        Self::new(TestFunctionSpec {
            kind: Kind::MollifiedStep,
            t,
            m: 1.0,
            e0,
            e1,
            c_small,
            c_big: default_big_c(),
            l_star: default_l_star(),
        })
    }

    pub fn with_l_star(mut self, l_star: f64) -> Result<Self> {
        self.spec.l_star = l_star;
        Self::new(self.spec)
    }

    pub fn spec(&self) -> &TestFunctionSpec {
        &self.spec
    }

    pub fn kind(&self) -> Kind {
        self.spec.kind
    }

    pub fn t(&self) -> f64 {
        self.spec.t
    }

    pub fn l_star(&self) -> f64 {
        self.spec.l_star
    }

    /// Normalization constant `A` of the Cauchy ramp.
    pub fn ramp_amplitude(&self) -> f64 {
        self.amp
    }

    /// Half-width of the ramp around `E0`.
    pub fn ramp_half_width(&self) -> f64 {
        match self.spec.kind {
            Kind::HalfRegularBump => self.spec.t * self.spec.m,
            Kind::MollifiedStep | Kind::Regular => self.spec.t,
            Kind::Zero => 0.0,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.derivs(x).0
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.derivs(x).1
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.derivs(x).2
    }

    /// `(f, f', f'')` at `x`.
    pub fn derivs(&self, x: f64) -> (f64, f64, f64) {
        let s = &self.spec;
        match s.kind {
            Kind::Zero => (0.0, 0.0, 0.0),
            Kind::Regular => {
                let u = (x - s.e0) / s.t;
                if u.abs() >= 1.0 {
                    return (0.0, 0.0, 0.0);
                }
                let q = 1.0 - u * u;
                let f = q.powi(4);
                let d1 = -8.0 * u * q.powi(3) / s.t;
                let d2 = (-8.0 * q.powi(3) + 48.0 * u * u * q * q) / (s.t * s.t);
                (f, d1, d2)
            }
            Kind::MollifiedStep => {
                if x < s.e0 + s.t {
                    let u = (x - s.e0 + s.t) / (2.0 * s.t);
                    let h = 2.0 * s.t;
                    (smoothstep(u), smoothstep_d1(u) / h, smoothstep_d2(u) / (h * h))
                } else {
                    self.fall(x)
                }
            }
            Kind::HalfRegularBump => {
                if x < s.e0 + s.t * s.m {
                    self.ramp(x)
                } else {
                    self.fall(x)
                }
            }
        }
    }

    /// Plateau and smoothstep descent on `[E1 - c'/2, E1 + c'/2]`.
    fn fall(&self, x: f64) -> (f64, f64, f64) {
        let c = self.spec.c_small;
        let u = (x - self.spec.e1 + 0.5 * c) / c;
        (1.0 - smoothstep(u), -smoothstep_d1(u) / c, -smoothstep_d2(u) / (c * c))
    }

    fn ramp(&self, x: f64) -> (f64, f64, f64) {
        let s = &self.spec;
        let (t, tm) = (s.t, s.t * s.m);
        let d = x - s.e0;
        if d <= -tm {
            return (0.0, 0.0, 0.0);
        }
        if d >= tm {
            return (1.0, 0.0, 0.0);
        }
        let a = self.amp;
        let den = d * d + t * t;
        let u = d.abs() / tm;
        let psi = cutoff(u);
        let dpsi = cutoff_d1(u) * d.signum() / tm;
        let d1 = a * t / den * psi;
        let d2 = a * (-2.0 * t * d / (den * den) * psi + t / den * dpsi);
        let f = if u <= 0.5 {
            a * (self.window_mass + (0.5 * s.m).atan() + (d / t).atan())
        } else {
            // Transition windows: integrate the density from the nearer end of the ramp.
            let rule = Rule::new(20);
            let dens = |y: f64| t / (y * y + t * t) * cutoff(y.abs() / tm);
            let lo = d.abs();
            let breaks: Vec<f64> = (0..=WINDOW_PANELS).map(|k| lo + (tm - lo) * k as f64 / WINDOW_PANELS as f64).collect();
            let tail = a * rule.integrate_composite(&breaks, dens);
            if d < 0.0 {
                tail
            } else {
                1.0 - tail
            }
        };
        (f, d1, d2)
    }

    /// Points where `f` is not analytic, plus local scales, for building quadrature meshes.
    pub fn features(&self) -> Vec<(f64, f64)> {
        let s = &self.spec;
        let c = s.c_small;
        match s.kind {
            Kind::Zero => vec![],
            Kind::Regular => vec![(s.e0 - s.t, s.t), (s.e0, s.t), (s.e0 + s.t, s.t)],
            Kind::MollifiedStep => vec![
                (s.e0 - s.t, s.t),
                (s.e0, s.t),
                (s.e0 + s.t, s.t),
                (s.e1 - 0.5 * c, c),
                (s.e1, c),
                (s.e1 + 0.5 * c, c),
            ],
            Kind::HalfRegularBump => {
                let tm = s.t * s.m;
                vec![
                    (s.e0 - tm, s.t),
                    (s.e0 - 0.5 * tm, s.t),
                    (s.e0, s.t),
                    (s.e0 + 0.5 * tm, s.t),
                    (s.e0 + tm, s.t),
                    (s.e1 - 0.5 * c, c),
                    (s.e1, c),
                    (s.e1 + 0.5 * c, c),
                ]
            }
        }
    }

    /// Closed intervals outside of which `f' = 0`.
    pub fn derivative_support(&self) -> Vec<(f64, f64)> {
        let s = &self.spec;
        let c = s.c_small;
        match s.kind {
            Kind::Zero => vec![],
            Kind::Regular => vec![(s.e0 - s.t, s.e0 + s.t)],
            Kind::MollifiedStep => vec![(s.e0 - s.t, s.e0 + s.t), (s.e1 - 0.5 * c, s.e1 + 0.5 * c)],
            Kind::HalfRegularBump => {
                let tm = s.t * s.m;
                vec![(s.e0 - tm, s.e0 + tm), (s.e1 - 0.5 * c, s.e1 + 0.5 * c)]
            }
        }
    }

    /// Support of `f` itself.
    pub fn support(&self) -> Option<(f64, f64)> {
        let iv = self.derivative_support();
        let lo = iv.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = iv.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        (lo < hi).then_some((lo, hi))
    }

    /// Quadrature breakpoints covering `supp f'`, refined geometrically toward the
    /// features down to a fraction `1/refine` of their scale.
    pub fn breakpoints(&self, refine: f64) -> Vec<Vec<f64>> {
        let feats = self.features();
        self.derivative_support()
            .into_iter()
            .map(|(a, b)| {
                let inside: Vec<(f64, f64)> = feats
                    .iter()
                    .filter(|(p, _)| *p >= a && *p <= b)
                    .map(|&(p, s)| (p, s / refine))
                    .collect();
                quad::feature_mesh(a, b, &inside, 4)
            })
            .collect()
    }

    /// Even cutoff `chi(y)`: 1 for `|y| <= 2 L_*`, 0 for `|y| >= 2 L_* + 1`.
    pub fn chi(&self, y: f64) -> f64 {
        1.0 - smoothstep(y.abs() - 2.0 * self.spec.l_star)
    }

    pub fn chi_d1(&self, y: f64) -> f64 {
        -smoothstep_d1(y.abs() - 2.0 * self.spec.l_star) * y.signum()
    }

    /// Quasi-analytic extension `(f(x) + i y f'(x)) chi(y)`.
    pub fn extension(&self, x: f64, y: f64) -> Complex64 {
        let (f, d1, _) = self.derivs(x);
        Complex64::new(f, y * d1) * self.chi(y)
    }

    /// `dbar f~ = (i y chi f'' + i (f + i y f') chi') / 2`.
    pub fn dbar(&self, x: f64, y: f64) -> Complex64 {
        let (f, d1, d2) = self.derivs(x);
        let i = Complex64::i();
        (i * (y * self.chi(y) * d2) + i * Complex64::new(f, y * d1) * self.chi_d1(y)) * 0.5
    }

    /// `(||f||_1, ||f'||_1, ||f''||_1)` by composite Gauss quadrature.
    pub fn norms(&self) -> (f64, f64, f64) {
        let rule = Rule::new(16);
        let Some((lo, hi)) = self.support() else {
            return (0.0, 0.0, 0.0);
        };
        let feats: Vec<(f64, f64)> = self.features().into_iter().map(|(p, s)| (p, s / 8.0)).collect();
        let mesh = quad::feature_mesh(lo, hi, &feats, 16);
        let n0 = rule.integrate_composite(&mesh, |x| self.eval(x).abs());
        let n1 = rule.integrate_composite(&mesh, |x| self.d1(x).abs());
        let n2 = rule.integrate_composite(&mesh, |x| self.d2(x).abs());
        (n0, n1, n2)
    }

    /// Checks the data contract of the kind at `samples` points per derivative window.
    ///
    /// For half-regular bumps: `tM < c'`, ramp and descent disjoint, `E1 - E0 >= c'`,
    /// `0 <= f' <= C' t / ((x - E0)^2 + t^2)` and `|f''| <= C' / ((x - E0)^2 + t^2)` on the ramp,
    /// `|f'|, |f''| <= C'` on the descent, and the `L^1` bounds on `f, f', f''`.
    pub fn validate(&self, samples: usize) -> Result<()> {
        let s = &self.spec;
        let fail = |msg: String| Err(Error::DataContractViolation(msg));
        let tol = 1e-9;
        match s.kind {
            Kind::Zero => return Ok(()),
            Kind::HalfRegularBump => {
                let tm = s.t * s.m;
                if !(tm < s.c_small) {
                    return fail(format!("tM < c' fails: tM = {tm}, c' = {}", s.c_small));
                }
                if !(s.e1 - s.e0 >= s.c_small) {
                    return fail(format!("E1 - E0 >= c' fails: E1 - E0 = {}", s.e1 - s.e0));
                }
                if !(s.e0 + tm < s.e1 - 0.5 * s.c_small) {
                    return fail("ramp and descent overlap".into());
                }
                let f_lo = self.eval(s.e0 - tm);
                let f_hi = self.eval(s.e0 + tm);
                if f_lo.abs() > 1e-14 || (f_hi - 1.0).abs() > 1e-12 {
                    return fail(format!("f(E0 - tM) = {f_lo}, f(E0 + tM) = {f_hi}"));
                }
                for k in 0..=samples {
                    let x = s.e0 - tm + 2.0 * tm * k as f64 / samples as f64;
                    let d = x - s.e0;
                    let env = s.c_big / (d * d + s.t * s.t);
                    let (f, d1, d2) = self.derivs(x);
                    if f < -tol || d1 < -tol * env * s.t {
                        return fail(format!("f, f' >= 0 fails at x = {x}"));
                    }
                    if d1 > env * s.t * (1.0 + tol) {
                        return fail(format!("f' <= C' t / ((x - E0)^2 + t^2) fails at x = {x}: f' = {d1}"));
                    }
                    if d2.abs() > env * (1.0 + tol) {
                        return fail(format!("|f''| <= C' / ((x - E0)^2 + t^2) fails at x = {x}: f'' = {d2}"));
                    }
                }
                self.check_descent(samples)?;
            }
            Kind::MollifiedStep => {
                if !(s.e0 + s.t < s.e1 - 0.5 * s.c_small) {
                    return fail("ramp and descent overlap".into());
                }
                self.check_descent(samples)?;
            }
            Kind::Regular => {}
        }
        let (n0, n1, n2) = self.norms();
        if n0 + n1 > s.c_big * (1.0 + tol) {
            return fail(format!("||f||_1 + ||f'||_1 <= C' fails: {}", n0 + n1));
        }
        if n2 > s.c_big / s.t * (1.0 + tol) {
            return fail(format!("||f''||_1 <= C'/t fails: {n2}"));
        }
        Ok(())
    }

    fn check_descent(&self, samples: usize) -> Result<()> {
        let s = &self.spec;
        for k in 0..=samples {
            let x = s.e1 - 0.5 * s.c_small + s.c_small * k as f64 / samples as f64;
            let (f, d1, d2) = self.derivs(x);
            if f < 0.0 {
                return Err(Error::DataContractViolation(format!("f >= 0 fails at x = {x}")));
            }
            if d1.abs() > s.c_big || d2.abs() > s.c_big {
                return Err(Error::DataContractViolation(format!(
                    "|f'|, |f''| <= C' near E1 fails at x = {x}: f' = {d1}, f'' = {d2}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that the derivative windows lie in `I_kappa = [alpha + kappa, beta - kappa]`.
    pub fn check_bulk(&self, alpha: f64, beta: f64, kappa: f64) -> Result<()> {
        for (a, b) in self.derivative_support() {
            if a < alpha + kappa || b > beta - kappa {
                return Err(Error::DataContractViolation(format!(
                    "derivative window [{a}, {b}] leaves I_kappa = [{}, {}]",
                    alpha + kappa,
                    beta - kappa
                )));
            }
        }
        Ok(())
    }

    /// Mirror image through `center`, for the kinds closed under reflection.
    pub fn reflected(&self, center: f64) -> Option<Self> {
        match self.spec.kind {
            Kind::Zero => Some(self.clone()),
            Kind::Regular => {
                let mut spec = self.spec.clone();
                spec.e0 = 2.0 * center - spec.e0;
                spec.e1 = spec.e0;
                Self::new(spec).ok()
            }
            _ => None,
        }
    }
}

/// Ramp cutoff `psi(u)`: 1 for `u <= 1/2`, 0 for `u >= 1`.
fn cutoff(u: f64) -> f64 {
    1.0 - smoothstep(2.0 * u - 1.0)
}

fn cutoff_d1(u: f64) -> f64 {
    -2.0 * smoothstep_d1(2.0 * u - 1.0)
}
