//! Simulated amplifier models.
//!
//! The memory-polynomial model computes
//! `y_n = s * sum_{k in {1,3,5}} sum_{q=0}^{2} c_kq z_{n-q} |z_{n-q}|^{k-1}`
//! and the cross variant adds `g * z_{n-2} |z_{n-1}| |z_n|`, where `s` is the
//! unit-gain scale.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operators::{apply_induced, measure_gain, ComplexSequence, Operator};

/// Odd orders carried by the memory-polynomial grid.
pub const ORDERS: [usize; 3] = [1, 3, 5];
/// Memory depth of the memory-polynomial models.
pub const MEMORY_DEPTH: usize = 3;

/// The 3x3 grid `c_kq`, `k in {1, 3, 5}`, `q in {0, 1, 2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientGrid {
    values: [[Complex64; MEMORY_DEPTH]; 3],
}

impl CoefficientGrid {
    pub fn zeros() -> Self {
        CoefficientGrid {
            values: [[Complex64::new(0.0, 0.0); MEMORY_DEPTH]; 3],
        }
    }

    /// Only the linear, undelayed term: `c_10 = 1`.
    pub fn linear() -> Self {
        let mut g = Self::zeros();
        g.set(1, 0, Complex64::new(1.0, 0.0));
        g
    }

    fn order_index(k: usize) -> usize {
        ORDERS
            .iter()
            .position(|&o| o == k)
            .unwrap_or_else(|| panic!("order {k} is not one of 1, 3, 5"))
    }

    /// Panics when `k` is not 1, 3 or 5 or `q > 2`.
    pub fn get(&self, k: usize, q: usize) -> Complex64 {
        self.values[Self::order_index(k)][q]
    }

    pub fn set(&mut self, k: usize, q: usize, c: Complex64) {
        self.values[Self::order_index(k)][q] = c;
    }

    /// Iterates `(k, q, c_kq)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        ORDERS
            .iter()
            .enumerate()
            .flat_map(move |(i, &k)| (0..MEMORY_DEPTH).map(move |q| (k, q, self.values[i][q])))
    }

    /// Parses `c_kq = re,im` lines; `#` lines are comments.
    pub fn parse<R: BufRead>(r: R) -> Result<Self> {
        let mut grid = Self::zeros();
        let mut seen = [[false; MEMORY_DEPTH]; 3];
        let mut offset = 0;
        for line in r.lines() {
            let line = line?;
            let start = offset;
            offset += line.len() + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (key, value) = t
                .split_once('=')
                .ok_or_else(|| Error::parse(start, format!("expected `c_kq = re,im`, found `{t}`")))?;
            let key = key.trim();
            let (k, q) = parse_key(key).ok_or_else(|| Error::parse(start, format!("unknown entry `{key}`")))?;
            let (ki, qi) = (Self::order_index(k), q);
            if seen[ki][qi] {
                return Err(Error::parse(start, format!("duplicate entry `{key}`")));
            }
            let c = parse_complex(value.trim())
                .ok_or_else(|| Error::parse(start, format!("malformed complex literal for `{key}`: `{}`", value.trim())))?;
            seen[ki][qi] = true;
            grid.values[ki][qi] = c;
        }
        for (ki, k) in ORDERS.iter().enumerate() {
            for q in 0..MEMORY_DEPTH {
                if !seen[ki][q] {
                    return Err(Error::parse(offset, format!("missing entry `c_{k}{q}`")));
                }
            }
        }
        Ok(grid)
    }

    pub fn write<W: Write>(&self, mut w: W, header: &str) -> Result<()> {
        for line in header.lines() {
            writeln!(w, "# {line}")?;
        }
        for (k, q, c) in self.iter() {
            writeln!(w, "c_{k}{q} = {},{}", c.re, c.im)?;
        }
        Ok(())
    }
}

fn parse_key(key: &str) -> Option<(usize, usize)> {
    let digits = key.strip_prefix("c_")?;
    let mut chars = digits.chars();
    let k = chars.next()?.to_digit(10)? as usize;
    let q = chars.next()?.to_digit(10)? as usize;
    if chars.next().is_some() || !ORDERS.contains(&k) || q >= MEMORY_DEPTH {
        return None;
    }
    Some((k, q))
}

fn parse_complex(s: &str) -> Option<Complex64> {
    let (re, im) = s.split_once(',')?;
    let re: f64 = re.trim().parse().ok()?;
    let im: f64 = im.trim().parse().ok()?;
    (re.is_finite() && im.is_finite()).then(|| Complex64::new(re, im))
}

/// Reads a coefficient file.
pub fn load_coefficients(path: &Path) -> Result<CoefficientGrid> {
    let file = std::fs::File::open(path)?;
    CoefficientGrid::parse(std::io::BufReader::new(file))
}

/// Strictly increasing envelope map for the memoryless model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StaticCurve {
    /// `r / (1 + (r / saturation)^(2p))^(1 / 2p)`.
    Rapp { saturation: f64, smoothness: f64 },
    /// `r - k3 r^3`, increasing on `[0, 1]` for `k3 < 1/3`.
    Cubic { k3: f64 },
}

impl StaticCurve {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StaticCurve::Rapp { saturation, smoothness } if saturation > 0.0 && smoothness > 0.0 => Ok(()),
            StaticCurve::Cubic { k3 } if k3 < 1.0 / 3.0 => Ok(()),
            _ => Err(Error::InvalidConfig(format!("{self:?} is not strictly increasing on [0, 1]"))),
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            StaticCurve::Rapp { saturation, smoothness } => {
                let p2 = 2.0 * smoothness;
                r / (1.0 + (r / saturation).powf(p2)).powf(1.0 / p2)
            }
            StaticCurve::Cubic { k3 } => r - k3 * r * r * r,
        }
    }

    /// Solves `eval(r) = s` for `r` in `[0, 1]` by bisection.
    pub fn inverse(&self, s: f64) -> Option<f64> {
        if s < 0.0 || s > self.eval(1.0) {
            return None;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-16 {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpaKind {
    MemoryPolynomial,
    MemoryPolynomialCross,
    StaticNonlinearity,
    Identity,
}

impl fmt::Display for HpaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HpaKind::MemoryPolynomial => "memory_polynomial",
            HpaKind::MemoryPolynomialCross => "memory_polynomial_cross",
            HpaKind::StaticNonlinearity => "static_nonlinearity",
            HpaKind::Identity => "identity",
        })
    }
}

/// A simulated amplifier operator.
#[derive(Debug, Clone, PartialEq)]
pub struct HpaModel {
    kind: HpaKind,
    coeffs: CoefficientGrid,
    cross_gain: Complex64,
    curve: Option<StaticCurve>,
    unit_gain_scale: f64,
}

impl HpaModel {
    pub fn identity() -> Self {
        HpaModel {
            kind: HpaKind::Identity,
            coeffs: CoefficientGrid::linear(),
            cross_gain: Complex64::new(0.0, 0.0),
            curve: None,
            unit_gain_scale: 1.0,
        }
    }

    pub fn memory_polynomial(coeffs: CoefficientGrid) -> Self {
        HpaModel {
            kind: HpaKind::MemoryPolynomial,
            coeffs,
            ..Self::identity()
        }
    }

    pub fn memory_polynomial_cross(coeffs: CoefficientGrid, cross_gain: Complex64) -> Self {
        HpaModel {
            kind: HpaKind::MemoryPolynomialCross,
            coeffs,
            cross_gain,
            ..Self::identity()
        }
    }

    pub fn static_nonlinearity(curve: StaticCurve) -> Result<Self> {
        curve.validate()?;
        Ok(HpaModel {
            kind: HpaKind::StaticNonlinearity,
            curve: Some(curve),
            ..Self::identity()
        })
    }

    pub fn kind(&self) -> HpaKind {
        self.kind
    }

    pub fn coefficients(&self) -> &CoefficientGrid {
        &self.coeffs
    }

    pub fn cross_gain(&self) -> Complex64 {
        self.cross_gain
    }

    pub fn curve(&self) -> Option<StaticCurve> {
        self.curve
    }

    pub fn unit_gain_scale(&self) -> f64 {
        self.unit_gain_scale
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        HpaModel {
            unit_gain_scale: scale,
            ..self.clone()
        }
    }

    /// Rescales the model so that [`measure_gain`] reports one.
    pub fn normalize_unit_gain(&self) -> Result<Self> {
        let raw = self.with_scale(1.0);
        let g = measure_gain(&raw, 1)?;
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::Normalization(format!("model gain {g} cannot be normalized")));
        }
        Ok(self.with_scale(1.0 / g))
    }

    /// Inverse of the normalized static envelope map: the input envelope
    /// producing output envelope `s`.
    pub fn static_inverse(&self, s: f64) -> Option<f64> {
        self.curve?.inverse(s / self.unit_gain_scale)
    }

    fn memory_kernel(&self, taps: &[Complex64]) -> Complex64 {
        let mut y = Complex64::new(0.0, 0.0);
        for q in 0..MEMORY_DEPTH {
            let z = taps[q];
            let r = z.norm();
            let r2 = r * r;
            let poly = self.coeffs.get(1, q) + r2 * (self.coeffs.get(3, q) + r2 * self.coeffs.get(5, q));
            y += z * poly;
        }
        if self.kind == HpaKind::MemoryPolynomialCross {
            y += self.cross_gain * taps[2] * taps[1].norm() * taps[0].norm();
        }
        y * self.unit_gain_scale
    }
}

impl Operator for HpaModel {
    fn memory_depth(&self) -> usize {
        match self.kind {
            HpaKind::MemoryPolynomial | HpaKind::MemoryPolynomialCross => MEMORY_DEPTH,
            HpaKind::StaticNonlinearity | HpaKind::Identity => 1,
        }
    }

    fn apply(&self, z: &ComplexSequence) -> Result<ComplexSequence> {
        match self.kind {
            HpaKind::Identity => {
                let s = self.unit_gain_scale;
                z.with_samples(z.samples().iter().map(|v| v * s).collect())
            }
            HpaKind::StaticNonlinearity => {
                let curve = self.curve.expect("static model carries a curve");
                let s = self.unit_gain_scale;
                z.with_samples(
                    z.samples()
                        .iter()
                        .map(|v| {
                            let r = v.norm();
                            if r == 0.0 {
                                *v
                            } else {
                                v * (s * curve.eval(r) / r)
                            }
                        })
                        .collect(),
                )
            }
            HpaKind::MemoryPolynomial | HpaKind::MemoryPolynomialCross => {
                apply_induced(MEMORY_DEPTH, |t| self.memory_kernel(t), z)
            }
        }
    }
}
