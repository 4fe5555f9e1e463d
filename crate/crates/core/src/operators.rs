//! Finite complex sequences and operators induced from multivariate kernels.
//!
//! All operators use the conventional (causal) indexing: a kernel of memory
//! depth `Q` applied to `N` samples yields `N - Q + 1` outputs, output `j`
//! being computed from inputs `j + Q - 1, j + Q - 2, ..., j`. No zero padding
//! is performed.

use std::io::{BufRead, Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Length of each constant-modulus probe used by [`measure_gain`].
pub const GAIN_PROBE_LEN: usize = 4096;
const GAIN_SEED: u64 = 0x6741_494e;

/// A finite block of complex baseband samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSequence {
    samples: Vec<Complex64>,
    sample_rate: f64,
}

impl ComplexSequence {
    /// Builds a sequence, rejecting empty input and non-finite samples.
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Length { needed: 1, got: 0 });
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::Domain(format!("sample rate {sample_rate} must be positive")));
        }
        if let Some(i) = samples.iter().position(|s| !(s.re.is_finite() && s.im.is_finite())) {
            return Err(Error::Domain(format!("sample {i} is not finite")));
        }
        Ok(ComplexSequence {
            samples,
            sample_rate,
        })
    }

    /// Unit sample rate.
    pub fn from_samples(samples: Vec<Complex64>) -> Result<Self> {
        Self::new(samples, 1.0)
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Vec<Complex64>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }

    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.len() as f64
    }

    pub fn max_modulus(&self) -> f64 {
        self.samples.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }

    /// Writes `index,re,im` CSV preceded by a sample-rate comment.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# sample_rate={}", self.sample_rate)?;
        writeln!(w, "index,re,im")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(w, "{},{},{}", i, s.re, s.im)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut sample_rate = 1.0;
        let mut samples = Vec::new();
        let mut offset = 0usize;
        let mut saw_header = false;
        for line in r.lines() {
            let line = line?;
            let start = offset;
            offset += line.len() + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(c) = t.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("sample_rate=") {
                    sample_rate = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(start, format!("bad sample rate `{v}`")))?;
                }
                continue;
            }
            if !saw_header {
                if t != "index,re,im" {
                    return Err(Error::parse(start, "expected header `index,re,im`"));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = t.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::parse(start, "expected three fields"));
            }
            let index: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(start, format!("bad index `{}`", fields[0])))?;
            if index != samples.len() {
                return Err(Error::parse(start, format!("index {index} out of order")));
            }
            let re: f64 = fields[1]
                .parse()
                .map_err(|_| Error::parse(start, format!("bad real part `{}`", fields[1])))?;
            let im: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(start, format!("bad imaginary part `{}`", fields[2])))?;
            samples.push(Complex64::new(re, im));
        }
        Self::new(samples, sample_rate)
    }

    /// Interleaved little-endian `f64` pairs, no header.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.samples {
            w.write_all(&s.re.to_le_bytes())?;
            w.write_all(&s.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, sample_rate: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 16 != 0 {
            return Err(Error::parse(
                bytes.len() - bytes.len() % 16,
                "trailing partial sample",
            ));
        }
        let samples = bytes
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..].try_into().unwrap());
                Complex64::new(re, im)
            })
            .collect();
        Self::new(samples, sample_rate)
    }
}

/// An operator mapping finite sequences to finite sequences with a fixed
/// memory depth.
pub trait Operator {
    /// Number of consecutive input samples consumed per output sample.
    fn memory_depth(&self) -> usize;

    fn apply(&self, x: &ComplexSequence) -> Result<ComplexSequence>;
}

/// Operator induced from a kernel `C^Q -> C`.
///
/// The kernel receives the taps newest first: `taps[0] = x_n`,
/// `taps[Q-1] = x_{n-Q+1}`.
pub struct InducedOperator<F> {
    memory_depth: usize,
    kernel: F,
}

impl<F> InducedOperator<F>
where
    F: Fn(&[Complex64]) -> Complex64,
{
    pub fn new(memory_depth: usize, kernel: F) -> Result<Self> {
        if memory_depth == 0 {
            return Err(Error::InvalidConfig("memory depth must be at least 1".into()));
        }
        Ok(InducedOperator {
            memory_depth,
            kernel,
        })
    }
}

impl<F> Operator for InducedOperator<F>
where
    F: Fn(&[Complex64]) -> Complex64,
{
    fn memory_depth(&self) -> usize {
        self.memory_depth
    }

    fn apply(&self, x: &ComplexSequence) -> Result<ComplexSequence> {
        apply_induced(self.memory_depth, &self.kernel, x)
    }
}

/// Applies `kernel` in conventional form.
pub fn apply_induced<F>(memory_depth: usize, kernel: F, x: &ComplexSequence) -> Result<ComplexSequence>
where
    F: Fn(&[Complex64]) -> Complex64,
{
    let q = memory_depth;
    let n = x.len();
    if q == 0 {
        return Err(Error::InvalidConfig("memory depth must be at least 1".into()));
    }
    if n < q {
        return Err(Error::Length { needed: q, got: n });
    }
    let mut taps = vec![Complex64::new(0.0, 0.0); q];
    let out = x
        .samples()
        .windows(q)
        .map(|w| {
            for (t, s) in taps.iter_mut().zip(w.iter().rev()) {
                *t = *s;
            }
            kernel(&taps)
        })
        .collect();
    x.with_samples(out)
}

/// Unit-modulus, pseudo-random-phase probe sequence.
pub fn unit_modulus_probe(len: usize, seed: u64) -> ComplexSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len)
        .map(|_| Complex64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU))
        .collect();
    ComplexSequence::from_samples(samples).expect("probe is finite and non-empty")
}

/// Mean output modulus of `op` over `trials` constant-modulus probes.
///
/// For operators with memory the modulus varies from sample to sample, so
/// this is the average rather than a pointwise gain.
pub fn measure_gain(op: &dyn Operator, trials: usize) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidConfig("gain measurement needs at least one trial".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..trials {
        let probe = unit_modulus_probe(GAIN_PROBE_LEN, GAIN_SEED.wrapping_add(t as u64));
        let y = op.apply(&probe)?;
        total += y.samples().iter().map(|s| s.norm()).sum::<f64>();
        count += y.len();
    }
    Ok(total / count as f64)
}
