//! The separable predistorter: a `K x Q` matrix of envelope functions.
//!
//! Multiplicative rows compute `a_k x_{n-m_k+1} prod_q P_kq(|x_{n-q+1}|)`;
//! additive rows replace the product by a sum. The diagonal structure is the
//! multiplicative one with `K = Q` and `m_k = k`.

use std::fmt;
use std::io::{BufRead, Write};

use num_complex::Complex64;

use crate::basis::{clamp_envelope, normalize_for_plot, poly_to_lut, OrthonormalBasis, UnivariateFunction};
use crate::error::{Error, Result};
use crate::operators::{ComplexSequence, Operator};
use crate::signals::DensityTable;

const FORMAT_TAG: &str = "sepdpd-predistorter";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    Multiplicative,
    Diagonal,
    Additive,
}

impl Structure {
    pub fn name(self) -> &'static str {
        match self {
            Structure::Multiplicative => "multiplicative",
            Structure::Diagonal => "diagonal",
            Structure::Additive => "additive",
        }
    }

    pub fn is_product(self) -> bool {
        !matches!(self, Structure::Additive)
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Structure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(Structure::Multiplicative),
            "diagonal" => Ok(Structure::Diagonal),
            "additive" => Ok(Structure::Additive),
            other => Err(Error::InvalidConfig(format!("unknown structure `{other}`"))),
        }
    }
}

/// Default tap for row `k` (0-based): `m_k = (k mod Q) + 1`.
pub fn default_tap(k: usize, depth: usize) -> usize {
    k % depth + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredistorterMatrix {
    structure: Structure,
    rows: usize,
    depth: usize,
    /// Row-major `rows x depth`.
    entries: Vec<UnivariateFunction>,
    /// 1-based tap index per row.
    taps: Vec<usize>,
    scales: Vec<Complex64>,
    basis: OrthonormalBasis,
}

/// Output of an application together with the number of input samples whose
/// envelope had to be clamped into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Applied {
    pub output: ComplexSequence,
    pub clamped: usize,
}

impl PredistorterMatrix {
    pub fn new(
        structure: Structure,
        rows: usize,
        depth: usize,
        entries: Vec<UnivariateFunction>,
        taps: Vec<usize>,
        scales: Vec<Complex64>,
        basis: OrthonormalBasis,
    ) -> Result<Self> {
        if rows == 0 || depth == 0 {
            return Err(Error::InvalidConfig("K and Q must be at least 1".into()));
        }
        if entries.len() != rows * depth || taps.len() != rows || scales.len() != rows {
            return Err(Error::InvalidConfig(format!(
                "expected {} entries, {rows} taps and {rows} scales",
                rows * depth
            )));
        }
        if let Some(t) = taps.iter().find(|&&t| t == 0 || t > depth) {
            return Err(Error::InvalidConfig(format!("tap index {t} outside 1..={depth}")));
        }
        if structure == Structure::Diagonal
            && (rows != depth || taps.iter().enumerate().any(|(k, &t)| t != k + 1))
        {
            return Err(Error::InvalidConfig("diagonal structure needs K = Q and m_k = k".into()));
        }
        if scales.iter().any(|s| !(s.re.is_finite() && s.im.is_finite())) {
            return Err(Error::Domain("non-finite row scale".into()));
        }
        for e in &entries {
            e.validate(&basis)?;
        }
        Ok(PredistorterMatrix {
            structure,
            rows,
            depth,
            entries,
            taps,
            scales,
            basis,
        })
    }

    /// Every entry equal to the constant `value`, unit scales, default taps.
    pub fn filled(structure: Structure, rows: usize, depth: usize, basis: &OrthonormalBasis, value: Complex64) -> Result<Self> {
        let entries = vec![UnivariateFunction::constant(basis, value); rows * depth];
        let taps = (0..rows).map(|k| default_tap(k, depth)).collect();
        Self::new(structure, rows, depth, entries, taps, vec![Complex64::new(1.0, 0.0); rows], basis.clone())
    }

    /// The identity operator `z_n = x_n` in the given structure.
    ///
    /// Product structures keep all-ones entries and silence rows `k > 1`
    /// through `a_k = 0`; the additive structure sets `P_11 = 1` and every
    /// other entry to zero.
    pub fn identity(structure: Structure, rows: usize, depth: usize, basis: &OrthonormalBasis) -> Result<Self> {
        let one = Complex64::new(1.0, 0.0);
        if structure.is_product() {
            let mut m = Self::filled(structure, rows, depth, basis, one)?;
            m.scales.iter_mut().skip(1).for_each(|s| *s = Complex64::new(0.0, 0.0));
            Ok(m)
        } else {
            let mut m = Self::filled(structure, rows, depth, basis, Complex64::new(0.0, 0.0))?;
            m.entries[0] = UnivariateFunction::constant(basis, one);
            Ok(m)
        }
    }

    /// Memory-polynomial predistorter as a diagonal matrix: off-diagonal
    /// entries are 1 and `P_qq(r) = sum_j coeffs[q][j] r^j`.
    pub fn memory_polynomial_equivalent(depth: usize, coeffs: &[Vec<Complex64>], basis: &OrthonormalBasis) -> Result<Self> {
        if coeffs.len() != depth {
            return Err(Error::InvalidConfig(format!("need {depth} diagonal polynomials, got {}", coeffs.len())));
        }
        let one = UnivariateFunction::constant(basis, Complex64::new(1.0, 0.0));
        let mut entries = Vec::with_capacity(depth * depth);
        for k in 0..depth {
            for q in 0..depth {
                entries.push(if k == q {
                    UnivariateFunction::from_monomials(basis, &coeffs[k])?
                } else {
                    one.clone()
                });
            }
        }
        Self::new(
            Structure::Diagonal,
            depth,
            depth,
            entries,
            (1..=depth).collect(),
            vec![Complex64::new(1.0, 0.0); depth],
            basis.clone(),
        )
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn scales(&self) -> &[Complex64] {
        &self.scales
    }

    pub fn basis(&self) -> &OrthonormalBasis {
        &self.basis
    }

    pub fn entry(&self, k: usize, q: usize) -> &UnivariateFunction {
        &self.entries[k * self.depth + q]
    }

    pub fn entries(&self) -> &[UnivariateFunction] {
        &self.entries
    }

    pub fn set_entry(&mut self, k: usize, q: usize, f: UnivariateFunction) -> Result<()> {
        f.validate(&self.basis)?;
        self.entries[k * self.depth + q] = f;
        Ok(())
    }

    pub fn set_scale(&mut self, k: usize, a: Complex64) {
        self.scales[k] = a;
    }

    /// Polynomial coefficients of every entry, row-major; `None` for LUTs.
    pub fn coefficients(&self) -> Option<Vec<&[Complex64]>> {
        self.entries
            .iter()
            .map(|e| match e {
                UnivariateFunction::Poly(u) => Some(u.as_slice()),
                UnivariateFunction::Lut(_) => None,
            })
            .collect()
    }

    pub fn apply_multiplicative(&self, x: &ComplexSequence) -> Result<Applied> {
        if !self.structure.is_product() {
            return Err(Error::Structure {
                expected: "multiplicative",
                found: self.structure.name(),
            });
        }
        self.apply_with_stats(x)
    }

    pub fn apply_additive(&self, x: &ComplexSequence) -> Result<Applied> {
        if self.structure != Structure::Additive {
            return Err(Error::Structure {
                expected: "additive",
                found: self.structure.name(),
            });
        }
        self.apply_with_stats(x)
    }

    /// Entry values `P_kq(|x_i|)` for every sample, laid out `[i][k][q]`.
    fn entry_values(&self, x: &[Complex64]) -> (Vec<Complex64>, usize) {
        let kq = self.rows * self.depth;
        let mut values = Vec::with_capacity(x.len() * kq);
        let mut psi = vec![0.0; self.basis.degree_count()];
        let mut clamped = 0;
        for s in x {
            let (r, c) = clamp_envelope(s.norm());
            clamped += c as usize;
            self.basis.eval_into(r, &mut psi);
            values.extend(self.entries.iter().map(|e| e.eval_with(&psi, r)));
        }
        (values, clamped)
    }

    /// Applies the matrix in conventional form, counting clamped envelopes.
    pub fn apply_with_stats(&self, x: &ComplexSequence) -> Result<Applied> {
        let q_depth = self.depth;
        if x.len() < q_depth {
            return Err(Error::Length {
                needed: q_depth,
                got: x.len(),
            });
        }
        let xs = x.samples();
        let (values, clamped) = self.entry_values(xs);
        let kq = self.rows * q_depth;
        let product = self.structure.is_product();
        let out = (q_depth - 1..xs.len())
            .map(|n| {
                let mut z = Complex64::new(0.0, 0.0);
                for k in 0..self.rows {
                    let mut acc = if product {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                    for q in 0..q_depth {
                        let v = values[(n - q) * kq + k * q_depth + q];
                        if product {
                            acc *= v;
                        } else {
                            acc += v;
                        }
                    }
                    z += self.scales[k] * xs[n + 1 - self.taps[k]] * acc;
                }
                z
            })
            .collect();
        Ok(Applied {
            output: x.with_samples(out)?,
            clamped,
        })
    }

    /// Factors every entry to unit weighted norm and folds the norms into the
    /// row scales, leaving the operator unchanged.
    pub fn normalized(&self) -> Result<Self> {
        if !self.structure.is_product() {
            return Err(Error::Structure {
                expected: "multiplicative",
                found: self.structure.name(),
            });
        }
        let mut out = self.clone();
        for k in 0..self.rows {
            let mut a = self.scales[k];
            for q in 0..self.depth {
                let (scaled, norm) = normalize_for_plot(self.entry(k, q), &self.basis)?;
                a *= norm;
                out.entries[k * self.depth + q] = scaled;
            }
            out.scales[k] = a;
        }
        Ok(out)
    }

    /// Tabulates every polynomial entry into an `size`-entry LUT. Returns the
    /// largest tabulation error over all entries.
    pub fn to_luts(&self, size: usize) -> Result<(Self, f64)> {
        let mut out = self.clone();
        let mut worst = 0.0f64;
        for (dst, src) in out.entries.iter_mut().zip(&self.entries) {
            if src.is_lut() {
                continue;
            }
            let conv = poly_to_lut(src, &self.basis, size)?;
            worst = worst.max(conv.max_error);
            *dst = conv.lut;
        }
        Ok((out, worst))
    }

    /// Writes the versioned text format.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let (repr, size) = match &self.entries[0] {
            UnivariateFunction::Poly(u) => ("poly", u.len()),
            UnivariateFunction::Lut(t) => ("lut", t.len()),
        };
        if self.entries.iter().any(|e| e.is_lut() != (repr == "lut")) {
            return Err(Error::InvalidConfig("mixed polynomial and LUT entries cannot be written".into()));
        }
        if repr == "lut" && self.entries.iter().any(|e| matches!(e, UnivariateFunction::Lut(t) if t.len() != size)) {
            return Err(Error::InvalidConfig("LUT entries must share one size".into()));
        }
        writeln!(w, "{FORMAT_TAG}")?;
        writeln!(w, "version = {FORMAT_VERSION}")?;
        writeln!(w, "structure = {}", self.structure)?;
        writeln!(w, "rows = {}", self.rows)?;
        writeln!(w, "depth = {}", self.depth)?;
        writeln!(w, "repr = {repr}")?;
        writeln!(w, "size = {size}")?;
        writeln!(w, "basis_size = {}", self.basis.degree_count())?;
        writeln!(w, "weight_bins = {}", self.basis.weight().bins())?;
        writeln!(w, "bin_width = {}", self.basis.weight().bin_width)?;
        let taps: Vec<String> = self.taps.iter().map(|t| t.to_string()).collect();
        writeln!(w, "taps = {}", taps.join(","))?;
        writeln!(w, "[scales]")?;
        writeln!(w, "k,re,im")?;
        for (k, a) in self.scales.iter().enumerate() {
            writeln!(w, "{},{},{}", k + 1, a.re, a.im)?;
        }
        writeln!(w, "[basis]")?;
        writeln!(w, "m,alpha,beta")?;
        for (m, (a, b)) in self.basis.alpha().iter().zip(self.basis.beta()).enumerate() {
            writeln!(w, "{m},{a},{b}")?;
        }
        writeln!(w, "[weight]")?;
        writeln!(w, "center,density")?;
        let wt = self.basis.weight();
        for (c, d) in wt.centers.iter().zip(&wt.densities) {
            writeln!(w, "{c},{d}")?;
        }
        writeln!(w, "[entries]")?;
        writeln!(w, "k,q,index,re,im")?;
        for k in 0..self.rows {
            for q in 0..self.depth {
                let values = match self.entry(k, q) {
                    UnivariateFunction::Poly(u) => u,
                    UnivariateFunction::Lut(t) => t,
                };
                for (i, v) in values.iter().enumerate() {
                    writeln!(w, "{},{},{},{},{}", k + 1, q + 1, i, v.re, v.im)?;
                }
            }
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        Parser::new(r)?.parse()
    }
}

impl Operator for PredistorterMatrix {
    fn memory_depth(&self) -> usize {
        self.depth
    }

    fn apply(&self, x: &ComplexSequence) -> Result<ComplexSequence> {
        Ok(self.apply_with_stats(x)?.output)
    }
}

struct Line {
    offset: usize,
    text: String,
}

struct Parser {
    lines: Vec<Line>,
    pos: usize,
    eof: usize,
}

impl Parser {
    fn new<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = Vec::new();
        let mut offset = 0;
        for line in r.lines() {
            let text = line?;
            let len = text.len() + 1;
            let t = text.trim();
            if !t.is_empty() && !t.starts_with('#') {
                lines.push(Line {
                    offset,
                    text: t.to_string(),
                });
            }
            offset += len;
        }
        Ok(Parser { lines, pos: 0, eof: offset })
    }

    fn next(&mut self, what: &str) -> Result<&Line> {
        let eof = self.eof;
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::parse(eof, format!("unexpected end of file, expected {what}")))?;
        self.pos += 1;
        Ok(line)
    }

    fn expect(&mut self, literal: &str) -> Result<()> {
        let line = self.next(&format!("`{literal}`"))?;
        if line.text != literal {
            return Err(Error::parse(line.offset, format!("expected `{literal}`, found `{}`", line.text)));
        }
        Ok(())
    }

    fn field(&mut self, key: &str) -> Result<(usize, String)> {
        let line = self.next(&format!("`{key} = ...`"))?;
        match line.text.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok((line.offset, v.trim().to_string())),
            _ => Err(Error::parse(line.offset, format!("expected `{key} = ...`"))),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (off, v) = self.field(key)?;
        v.parse().map_err(|_| Error::parse(off, format!("bad value `{v}` for `{key}`")))
    }

    fn row(&mut self, what: &str, fields: usize) -> Result<(usize, Vec<String>)> {
        let line = self.next(what)?;
        let parts: Vec<String> = line.text.split(',').map(|s| s.trim().to_string()).collect();
        if parts.len() != fields {
            return Err(Error::parse(line.offset, format!("expected {fields} fields in {what}")));
        }
        Ok((line.offset, parts))
    }

    fn parse(mut self) -> Result<PredistorterMatrix> {
        self.expect(FORMAT_TAG)?;
        let version: u32 = self.number("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (off, s) = self.field("structure")?;
        let structure: Structure = s.parse().map_err(|_| Error::parse(off, format!("unknown structure `{s}`")))?;
        let rows: usize = self.number("rows")?;
        let depth: usize = self.number("depth")?;
        let (off, repr) = self.field("repr")?;
        let lut = match repr.as_str() {
            "poly" => false,
            "lut" => true,
            _ => return Err(Error::parse(off, format!("unknown repr `{repr}`"))),
        };
        let size: usize = self.number("size")?;
        let basis_size: usize = self.number("basis_size")?;
        let bins: usize = self.number("weight_bins")?;
        let bin_width: f64 = self.number("bin_width")?;
        let (off, taps) = self.field("taps")?;
        let taps: Vec<usize> = taps
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(off, "bad tap list"))?;

        self.expect("[scales]")?;
        self.expect("k,re,im")?;
        let mut scales = Vec::with_capacity(rows);
        for k in 0..rows {
            let (off, f) = self.row("scale row", 3)?;
            check_index(off, &f[0], k + 1)?;
            scales.push(complex(off, &f[1], &f[2])?);
        }
        self.expect("[basis]")?;
        self.expect("m,alpha,beta")?;
        let mut alpha = Vec::with_capacity(basis_size);
        let mut beta = Vec::with_capacity(basis_size);
        for m in 0..basis_size {
            let (off, f) = self.row("basis row", 3)?;
            check_index(off, &f[0], m)?;
            alpha.push(real(off, &f[1])?);
            beta.push(real(off, &f[2])?);
        }
        self.expect("[weight]")?;
        self.expect("center,density")?;
        let mut centers = Vec::with_capacity(bins);
        let mut densities = Vec::with_capacity(bins);
        for _ in 0..bins {
            let (off, f) = self.row("weight row", 2)?;
            centers.push(real(off, &f[0])?);
            densities.push(real(off, &f[1])?);
        }
        self.expect("[entries]")?;
        self.expect("k,q,index,re,im")?;
        let mut entries = Vec::with_capacity(rows * depth);
        for k in 0..rows {
            for q in 0..depth {
                let mut values = Vec::with_capacity(size);
                for i in 0..size {
                    let (off, f) = self.row("entry row", 5)?;
                    check_index(off, &f[0], k + 1)?;
                    check_index(off, &f[1], q + 1)?;
                    check_index(off, &f[2], i)?;
                    values.push(complex(off, &f[3], &f[4])?);
                }
                entries.push(if lut {
                    UnivariateFunction::Lut(values)
                } else {
                    UnivariateFunction::Poly(values)
                });
            }
        }
        self.expect("end")?;
        if let Some(extra) = self.lines.get(self.pos) {
            return Err(Error::parse(extra.offset, "trailing content after `end`"));
        }
        let weight = DensityTable {
            centers,
            densities,
            bin_width,
        };
        let basis = OrthonormalBasis::from_parts(alpha, beta, weight)?;
        PredistorterMatrix::new(structure, rows, depth, entries, taps, scales, basis)
    }
}

fn check_index(off: usize, field: &str, want: usize) -> Result<()> {
    match field.parse::<usize>() {
        Ok(v) if v == want => Ok(()),
        _ => Err(Error::parse(off, format!("expected index {want}, found `{field}`"))),
    }
}

fn real(off: usize, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::parse(off, format!("bad number `{s}`")))
}

fn complex(off: usize, re: &str, im: &str) -> Result<Complex64> {
    Ok(Complex64::new(real(off, re)?, real(off, im)?))
}
