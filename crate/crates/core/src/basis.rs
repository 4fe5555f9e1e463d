//! Univariate function representations on the envelope domain `[0, 1]`.
//!
//! Polynomial entries are expanded in a basis orthonormal with respect to
//! `w(r) = rho(r) r^2`, where `rho` is the envelope density of the transmitted
//! signal. The inner product is the midpoint sum over the histogram grid:
//! `<f, g> = sum_i rho_i c_i^2 dr f(c_i) conj(g(c_i))`. The basis is generated
//! by the Stieltjes procedure, which yields the three-term recursion
//!
//! `sqrt(beta_{m+1}) psi_{m+1}(r) = (r - alpha_m) psi_m(r) - sqrt(beta_m) psi_{m-1}(r)`
//!
//! with `psi_0 = 1 / sqrt(beta_0)`.

use std::io::{BufRead, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signals::DensityTable;

/// Orthonormal polynomials for the signal-density weight.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    weight: DensityTable,
}

/// Builds `degree_count` orthonormal polynomials for the weight `rho(r) r^2`.
pub fn build_basis(weight: &DensityTable, degree_count: usize) -> Result<OrthonormalBasis> {
    if degree_count == 0 {
        return Err(Error::InvalidConfig("basis needs at least one function".into()));
    }
    if weight.centers.len() != weight.densities.len() || weight.centers.is_empty() {
        return Err(Error::InvalidConfig("density table is malformed".into()));
    }
    if weight.densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::Domain("density values must be finite and non-negative".into()));
    }
    let (nodes, w) = quadrature(weight);
    let beta0: f64 = w.iter().sum();
    if !(beta0 > 0.0) {
        return Err(Error::Rank { moment_index: 0 });
    }
    let scale = w.iter().zip(&nodes).map(|(w, x)| w * x * x).sum::<f64>() / beta0;
    let tiny = 1e-13 * scale.max(f64::MIN_POSITIVE);

    let mut alpha = Vec::with_capacity(degree_count);
    let mut beta = vec![beta0];
    // values of psi_{m-1} and psi_m at the nodes
    let mut prev = vec![0.0; nodes.len()];
    let mut cur = vec![1.0 / beta0.sqrt(); nodes.len()];
    for m in 0..degree_count {
        let a: f64 = w
            .iter()
            .zip(&nodes)
            .zip(&cur)
            .map(|((w, x), p)| w * x * p * p)
            .sum();
        alpha.push(a);
        if m + 1 == degree_count {
            break;
        }
        let sb = if m == 0 { 0.0 } else { beta[m].sqrt() };
        let mut next: Vec<f64> = nodes
            .iter()
            .zip(&cur)
            .zip(&prev)
            .map(|((x, c), p)| (x - a) * c - sb * p)
            .collect();
        // one reorthogonalization pass against the two previous functions
        for basis_vec in [&cur, &prev] {
            let proj: f64 = w.iter().zip(&next).zip(basis_vec.iter()).map(|((w, n), b)| w * n * b).sum();
            next.iter_mut().zip(basis_vec.iter()).for_each(|(n, b)| *n -= proj * b);
        }
        let b: f64 = w.iter().zip(&next).map(|(w, n)| w * n * n).sum();
        if !(b > tiny) {
            return Err(Error::Rank { moment_index: m + 1 });
        }
        let inv = 1.0 / b.sqrt();
        next.iter_mut().for_each(|n| *n *= inv);
        beta.push(b);
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(OrthonormalBasis {
        alpha,
        beta,
        weight: weight.clone(),
    })
}

/// Nodes and effective weights `rho_i c_i^2 dr` with positive weight.
fn quadrature(weight: &DensityTable) -> (Vec<f64>, Vec<f64>) {
    weight
        .centers
        .iter()
        .zip(&weight.densities)
        .map(|(&c, &d)| (c, d * c * c * weight.bin_width))
        .filter(|&(_, w)| w > 0.0)
        .unzip()
}

impl OrthonormalBasis {
    /// Rebuilds a basis from stored recursion coefficients.
    pub fn from_parts(alpha: Vec<f64>, beta: Vec<f64>, weight: DensityTable) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != beta.len() {
            return Err(Error::InvalidConfig("recursion coefficient lengths differ".into()));
        }
        if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) || alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidConfig("recursion coefficients must be finite, beta positive".into()));
        }
        Ok(OrthonormalBasis { alpha, beta, weight })
    }

    pub fn degree_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn weight(&self) -> &DensityTable {
        &self.weight
    }

    /// Writes `psi_0(r) .. psi_{M-1}(r)` into `out`.
    pub fn eval_into(&self, r: f64, out: &mut [f64]) {
        let m = self.degree_count();
        debug_assert_eq!(out.len(), m);
        out[0] = 1.0 / self.beta[0].sqrt();
        if m > 1 {
            out[1] = (r - self.alpha[0]) * out[0] / self.beta[1].sqrt();
        }
        for k in 1..m.saturating_sub(1) {
            out[k + 1] = ((r - self.alpha[k]) * out[k] - self.beta[k].sqrt() * out[k - 1]) / self.beta[k + 1].sqrt();
        }
    }

    pub fn eval(&self, r: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.degree_count()];
        self.eval_into(r, &mut out);
        out
    }

    /// Quadrature nodes and weights of the basis inner product.
    pub fn quadrature(&self) -> (Vec<f64>, Vec<f64>) {
        quadrature(&self.weight)
    }

    /// `G_ij = <psi_i, psi_j>`; the identity for an orthonormal basis.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let m = self.degree_count();
        let (nodes, w) = self.quadrature();
        let mut g = vec![vec![0.0; m]; m];
        let mut psi = vec![0.0; m];
        for (x, w) in nodes.iter().zip(&w) {
            self.eval_into(*x, &mut psi);
            for i in 0..m {
                for j in 0..m {
                    g[i][j] += w * psi[i] * psi[j];
                }
            }
        }
        g
    }

    /// Weighted L2 norm `sqrt(sum w |f|^2)` of any univariate function.
    pub fn norm(&self, f: &UnivariateFunction) -> f64 {
        match f {
            UnivariateFunction::Poly(u) => u.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt(),
            UnivariateFunction::Lut(_) => {
                let (nodes, w) = self.quadrature();
                nodes
                    .iter()
                    .zip(&w)
                    .map(|(x, w)| w * f.eval(self, *x).0.norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    /// Coefficients of a real-argument function in this basis, by projection.
    /// Exact for polynomials of degree below `degree_count`.
    pub fn project<F: Fn(f64) -> Complex64>(&self, f: F) -> Vec<Complex64> {
        let m = self.degree_count();
        let (nodes, w) = self.quadrature();
        let mut u = vec![Complex64::new(0.0, 0.0); m];
        let mut psi = vec![0.0; m];
        for (x, w) in nodes.iter().zip(&w) {
            self.eval_into(*x, &mut psi);
            let v = f(*x) * *w;
            for (u, p) in u.iter_mut().zip(&psi) {
                *u += v * *p;
            }
        }
        u
    }
}

/// One predistorter matrix entry `P_kq` on the envelope domain `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum UnivariateFunction {
    /// Coefficients `u_m` of `sum_m u_m psi_m(r)`.
    Poly(Vec<Complex64>),
    /// `L >= 2` samples at `r_i = i / (L - 1)`, linearly interpolated.
    Lut(Vec<Complex64>),
}

impl UnivariateFunction {
    /// The constant function `c` in `basis`.
    pub fn constant(basis: &OrthonormalBasis, c: Complex64) -> Self {
        let mut u = vec![Complex64::new(0.0, 0.0); basis.degree_count()];
        u[0] = c * basis.beta[0].sqrt();
        UnivariateFunction::Poly(u)
    }

    pub fn zero(basis: &OrthonormalBasis) -> Self {
        UnivariateFunction::Poly(vec![Complex64::new(0.0, 0.0); basis.degree_count()])
    }

    /// Polynomial from monomial coefficients `f(r) = sum_j c_j r^j`.
    pub fn from_monomials(basis: &OrthonormalBasis, coeffs: &[Complex64]) -> Result<Self> {
        if coeffs.len() > basis.degree_count() {
            return Err(Error::InvalidConfig(format!(
                "degree {} exceeds basis size {}",
                coeffs.len() - 1,
                basis.degree_count()
            )));
        }
        Ok(UnivariateFunction::Poly(basis.project(|r| {
            coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| acc * r + c)
        })))
    }

    pub fn validate(&self, basis: &OrthonormalBasis) -> Result<()> {
        let values = match self {
            UnivariateFunction::Poly(u) => {
                if u.len() != basis.degree_count() {
                    return Err(Error::InvalidConfig(format!(
                        "{} coefficients for a basis of {}",
                        u.len(),
                        basis.degree_count()
                    )));
                }
                u
            }
            UnivariateFunction::Lut(t) => {
                if t.len() < 2 {
                    return Err(Error::InvalidConfig("LUT needs at least two entries".into()));
                }
                t
            }
        };
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Domain("non-finite function coefficient".into()));
        }
        Ok(())
    }

    /// Evaluates at `r`, clamping to `[0, 1]`. The flag reports a clamp.
    pub fn eval(&self, basis: &OrthonormalBasis, r: f64) -> (Complex64, bool) {
        let (r, clamped) = clamp_envelope(r);
        let v = match self {
            UnivariateFunction::Poly(u) => {
                let psi = basis.eval(r);
                dot(u, &psi)
            }
            UnivariateFunction::Lut(t) => lut_interp(t, r),
        };
        (v, clamped)
    }

    /// Evaluates with precomputed `psi(r)`; `r` must already lie in `[0, 1]`.
    #[inline]
    pub fn eval_with(&self, psi: &[f64], r: f64) -> Complex64 {
        match self {
            UnivariateFunction::Poly(u) => dot(u, psi),
            UnivariateFunction::Lut(t) => lut_interp(t, r),
        }
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        match self {
            UnivariateFunction::Poly(u) => UnivariateFunction::Poly(u.iter().map(|c| c * s).collect()),
            UnivariateFunction::Lut(t) => UnivariateFunction::Lut(t.iter().map(|c| c * s).collect()),
        }
    }

    pub fn is_lut(&self) -> bool {
        matches!(self, UnivariateFunction::Lut(_))
    }
}

#[inline]
pub(crate) fn clamp_envelope(r: f64) -> (f64, bool) {
    if r > 1.0 {
        (1.0, true)
    } else if r < 0.0 {
        (0.0, true)
    } else {
        (r, false)
    }
}

#[inline]
fn dot(u: &[Complex64], psi: &[f64]) -> Complex64 {
    u.iter().zip(psi).fold(Complex64::new(0.0, 0.0), |acc, (c, p)| acc + c * p)
}

#[inline]
fn lut_interp(t: &[Complex64], r: f64) -> Complex64 {
    let pos = r * (t.len() - 1) as f64;
    let i = (pos.floor() as usize).min(t.len() - 2);
    let frac = pos - i as f64;
    t[i] + (t[i + 1] - t[i]) * frac
}

/// Result of tabulating a polynomial entry.
#[derive(Debug, Clone)]
pub struct LutConversion {
    pub lut: UnivariateFunction,
    /// Largest deviation from the polynomial on a 10^4-point grid.
    pub max_error: f64,
}

/// Samples a polynomial entry at `size` uniform points of `[0, 1]`.
pub fn poly_to_lut(f: &UnivariateFunction, basis: &OrthonormalBasis, size: usize) -> Result<LutConversion> {
    const CHECK_POINTS: usize = 10_000;
    if size < 2 {
        return Err(Error::InvalidConfig("LUT needs at least two entries".into()));
    }
    if f.is_lut() {
        return Err(Error::Structure {
            expected: "polynomial",
            found: "LUT",
        });
    }
    let table: Vec<Complex64> = (0..size)
        .map(|i| f.eval(basis, i as f64 / (size - 1) as f64).0)
        .collect();
    let lut = UnivariateFunction::Lut(table);
    let max_error = (0..=CHECK_POINTS)
        .map(|i| {
            let r = i as f64 / CHECK_POINTS as f64;
            (f.eval(basis, r).0 - lut.eval(basis, r).0).norm()
        })
        .fold(0.0, f64::max);
    Ok(LutConversion { lut, max_error })
}

/// Scales `f` to unit weighted norm, returning the scaled entry and the
/// factor `a` with `f = a * scaled`.
pub fn normalize_for_plot(f: &UnivariateFunction, basis: &OrthonormalBasis) -> Result<(UnivariateFunction, Complex64)> {
    let n = basis.norm(f);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Normalization("entry has zero norm".into()));
    }
    Ok((f.scaled(Complex64::new(1.0 / n, 0.0)), Complex64::new(n, 0.0)))
}

/// Writes a LUT as `index,r,re,im` CSV with a size/domain header line.
pub fn write_lut_csv<W: Write>(f: &UnivariateFunction, mut w: W) -> Result<()> {
    let UnivariateFunction::Lut(t) = f else {
        return Err(Error::Structure {
            expected: "LUT",
            found: "polynomial",
        });
    };
    writeln!(w, "# lut L={} domain=0,1", t.len())?;
    writeln!(w, "index,r,re,im")?;
    let last = (t.len() - 1) as f64;
    for (i, v) in t.iter().enumerate() {
        writeln!(w, "{},{},{},{}", i, i as f64 / last, v.re, v.im)?;
    }
    Ok(())
}

pub fn read_lut_csv<R: BufRead>(r: R) -> Result<UnivariateFunction> {
    let mut declared = None;
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut saw_columns = false;
    for line in r.lines() {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(h) = t.strip_prefix('#') {
            for tok in h.split_whitespace() {
                if let Some(v) = tok.strip_prefix("L=") {
                    declared = Some(
                        v.parse::<usize>()
                            .map_err(|_| Error::parse(start, format!("bad LUT size `{v}`")))?,
                    );
                } else if let Some(v) = tok.strip_prefix("domain=") {
                    if v != "0,1" {
                        return Err(Error::parse(start, format!("unsupported domain `{v}`")));
                    }
                }
            }
            continue;
        }
        if !saw_columns {
            if t != "index,r,re,im" {
                return Err(Error::parse(start, "expected header `index,r,re,im`"));
            }
            saw_columns = true;
            continue;
        }
        let f: Vec<&str> = t.split(',').collect();
        if f.len() != 4 {
            return Err(Error::parse(start, "expected four fields"));
        }
        let idx: usize = f[0].parse().map_err(|_| Error::parse(start, "bad index"))?;
        if idx != entries.len() {
            return Err(Error::parse(start, format!("index {idx} out of order")));
        }
        let re: f64 = f[2].parse().map_err(|_| Error::parse(start, format!("bad real part `{}`", f[2])))?;
        let im: f64 = f[3].parse().map_err(|_| Error::parse(start, format!("bad imaginary part `{}`", f[3])))?;
        entries.push(Complex64::new(re, im));
    }
    let Some(l) = declared else {
        return Err(Error::parse(0, "missing `# lut L=..` header"));
    };
    if l != entries.len() {
        return Err(Error::parse(offset, format!("header declares {l} entries, found {}", entries.len())));
    }
    if l < 2 {
        return Err(Error::parse(0, "LUT needs at least two entries"));
    }
    Ok(UnivariateFunction::Lut(entries))
}

/// Binary table: `L` pairs of little-endian `f32` (re, im).
pub fn write_lut_binary<W: Write>(f: &UnivariateFunction, mut w: W) -> Result<()> {
    let UnivariateFunction::Lut(t) = f else {
        return Err(Error::Structure {
            expected: "LUT",
            found: "polynomial",
        });
    };
    for v in t {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
    }
    Ok(())
}
