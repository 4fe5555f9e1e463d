//! Test waveforms and envelope statistics.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::operators::ComplexSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveformKind {
    MulticarrierOfdm,
    FilteredQam,
    Tones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modulation {
    Qpsk,
    Qam16,
}

impl Modulation {
    fn draw<R: Rng>(self, rng: &mut R) -> Complex64 {
        match self {
            Modulation::Qpsk => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                let re = if rng.gen::<bool>() { s } else { -s };
                let im = if rng.gen::<bool>() { s } else { -s };
                Complex64::new(re, im)
            }
            Modulation::Qam16 => {
                const LEVELS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
                let s = 1.0 / 10f64.sqrt();
                Complex64::new(LEVELS[rng.gen_range(0..4)] * s, LEVELS[rng.gen_range(0..4)] * s)
            }
        }
    }
}

/// Waveform generator settings.
///
/// `num_subcarriers` is the active subcarrier count for OFDM and the tone
/// count for [`WaveformKind::Tones`]; filtered QAM ignores it. `oversampling`
/// is the ratio of sample rate to occupied bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformConfig {
    pub kind: WaveformKind,
    pub num_subcarriers: usize,
    /// Required for OFDM and filtered QAM, must be absent for tones.
    pub modulation: Option<Modulation>,
    pub oversampling: usize,
    pub num_samples: usize,
    pub peak_normalization: f64,
    pub seed: u64,
    /// Cyclic prefix length as a fraction of the OFDM symbol.
    pub guard_fraction: f64,
    /// Raised-cosine edge ramp between OFDM symbols, in samples.
    pub edge_ramp: usize,
    /// Root-raised-cosine excess bandwidth for filtered QAM.
    pub rolloff: f64,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        WaveformConfig {
            kind: WaveformKind::MulticarrierOfdm,
            num_subcarriers: 1024,
            modulation: Some(Modulation::Qam16),
            oversampling: 4,
            num_samples: 25_600,
            peak_normalization: 0.95,
            seed: 1,
            guard_fraction: 0.125,
            edge_ramp: 0,
            rolloff: 0.25,
        }
    }
}

impl WaveformConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_subcarriers == 0 || self.oversampling == 0 || self.num_samples == 0 {
            return bad("subcarrier count, oversampling and sample count must be positive".into());
        }
        if !(self.peak_normalization > 0.0 && self.peak_normalization <= 1.0) {
            return bad(format!("peak normalization {} outside (0, 1]", self.peak_normalization));
        }
        match (self.kind, self.modulation) {
            (WaveformKind::Tones, Some(_)) => bad("tones carry no modulation".into()),
            (WaveformKind::MulticarrierOfdm | WaveformKind::FilteredQam, None) => {
                bad("modulated waveforms need a modulation".into())
            }
            _ => Ok(()),
        }?;
        if !(0.0..1.0).contains(&self.guard_fraction) {
            return bad(format!("guard fraction {} outside [0, 1)", self.guard_fraction));
        }
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return bad(format!("rolloff {} outside (0, 1]", self.rolloff));
        }
        Ok(())
    }
}

/// Generates the configured waveform. Deterministic in `cfg.seed`.
pub fn generate(cfg: &WaveformConfig) -> Result<ComplexSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = match cfg.kind {
        WaveformKind::MulticarrierOfdm => ofdm(cfg, &mut rng),
        WaveformKind::FilteredQam => filtered_qam(cfg, &mut rng),
        WaveformKind::Tones => tones(cfg, &mut rng),
    };
    let peak = raw.iter().map(|s| s.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Domain("generated waveform is identically zero".into()));
    }
    let scale = cfg.peak_normalization / peak * (1.0 - 4.0 * f64::EPSILON);
    ComplexSequence::from_samples(raw.into_iter().map(|s| s * scale).collect())
}

/// Active OFDM bins for `n` subcarriers in an FFT of `size`, DC excluded.
pub(crate) fn active_bins(n: usize, size: usize) -> Vec<usize> {
    let upper = n.div_ceil(2);
    let lower = n / 2;
    (1..=upper).chain(size - lower..size).collect()
}

/// One OFDM symbol body: inverse DFT of `symbols` placed on the active bins.
pub(crate) fn ofdm_symbol(symbols: &[Complex64], size: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut spectrum = vec![Complex64::new(0.0, 0.0); size];
    for (bin, s) in active_bins(symbols.len(), size).into_iter().zip(symbols) {
        spectrum[bin] = *s;
    }
    planner.plan_fft_inverse(size).process(&mut spectrum);
    let norm = 1.0 / size as f64;
    spectrum.iter_mut().for_each(|s| *s *= norm);
    spectrum
}

fn ofdm(cfg: &WaveformConfig, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let modulation = cfg.modulation.expect("validated");
    let size = cfg.num_subcarriers * cfg.oversampling;
    let cp = (cfg.guard_fraction * size as f64).round() as usize;
    let ramp = cfg.edge_ramp;
    let step = size + cp;
    let n = cfg.num_samples;
    let mut out = vec![Complex64::new(0.0, 0.0); n + step + 2 * ramp];
    let taper: Vec<f64> = (0..ramp)
        .map(|i| 0.5 - 0.5 * (PI * (i as f64 + 0.5) / ramp as f64).cos())
        .collect();
    let mut planner = FftPlanner::new();
    let mut pos = 0;
    while pos < n + ramp {
        let symbols: Vec<Complex64> = (0..cfg.num_subcarriers).map(|_| modulation.draw(rng)).collect();
        let body = ofdm_symbol(&symbols, size, &mut planner);
        // cyclic extension: prefix of cp + ramp samples, postfix of ramp samples
        let ext_len = cp + size + 2 * ramp;
        let first = (size - (cp + ramp) % size) % size;
        for i in 0..ext_len {
            let mut v = body[(first + i) % size];
            if i < ramp {
                v *= taper[i];
            } else if i >= ext_len - ramp {
                v *= taper[ext_len - 1 - i];
            }
            out[pos + i] += v;
        }
        pos += step;
    }
    out.drain(..ramp);
    out.truncate(n);
    out
}

/// Unit-energy root-raised-cosine taps spanning `span` symbols either side.
pub(crate) fn rrc_taps(rolloff: f64, sps: usize, span: usize) -> Vec<f64> {
    let half = (span * sps) as isize;
    let b = rolloff;
    let mut h: Vec<f64> = (-half..=half)
        .map(|i| {
            let t = i as f64 / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - b + 4.0 * b / PI
            } else if ((4.0 * b * t).abs() - 1.0).abs() < 1e-9 {
                b / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin() + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                ((PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos())
                    / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    let energy = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= energy);
    h
}

fn filtered_qam(cfg: &WaveformConfig, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    const SPAN: usize = 8;
    let modulation = cfg.modulation.expect("validated");
    let sps = cfg.oversampling;
    let taps = rrc_taps(cfg.rolloff, sps, SPAN);
    let delay = SPAN * sps;
    let nsym = (cfg.num_samples + 2 * delay).div_ceil(sps) + 1;
    let symbols: Vec<Complex64> = (0..nsym).map(|_| modulation.draw(rng)).collect();
    (0..cfg.num_samples)
        .map(|i| {
            let t = i + 2 * delay;
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, h) in taps.iter().enumerate() {
                let idx = t as isize - j as isize;
                if idx >= 0 && (idx as usize).is_multiple_of(sps) {
                    acc += symbols[idx as usize / sps] * h;
                }
            }
            acc
        })
        .collect()
}

fn tones(cfg: &WaveformConfig, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let count = cfg.num_subcarriers;
    let spacing = 1.0 / (count * cfg.oversampling) as f64;
    let centre = (count as f64 - 1.0) / 2.0;
    let tones: Vec<(f64, f64)> = (0..count)
        .map(|j| ((j as f64 - centre) * spacing, rng.gen::<f64>() * 2.0 * PI))
        .collect();
    (0..cfg.num_samples)
        .map(|n| {
            tones
                .iter()
                .map(|&(f, phase)| Complex64::from_polar(1.0, 2.0 * PI * f * n as f64 + phase))
                .sum()
        })
        .collect()
}

/// Histogram estimate of the envelope density on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub centers: Vec<f64>,
    pub densities: Vec<f64>,
    pub bin_width: f64,
}

impl DensityTable {
    /// Flat density on `[0, 1]`.
    pub fn uniform(bins: usize) -> Self {
        let w = 1.0 / bins as f64;
        DensityTable {
            centers: (0..bins).map(|i| (i as f64 + 0.5) * w).collect(),
            densities: vec![1.0; bins],
            bin_width: w,
        }
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    /// `sum(density * width)`, one for a normalized table.
    pub fn total_mass(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.bin_width
    }
}

/// Normalized histogram of `|x_n|` over `bins` equal bins on `[0, 1]`.
pub fn envelope_histogram(x: &ComplexSequence, bins: usize) -> Result<DensityTable> {
    if bins < 2 {
        return Err(Error::InvalidConfig("histogram needs at least two bins".into()));
    }
    let mut counts = vec![0usize; bins];
    for (i, s) in x.samples().iter().enumerate() {
        let r = s.norm();
        if r > 1.0 {
            return Err(Error::Domain(format!("sample {i} has modulus {r} > 1")));
        }
        let b = ((r * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let width = 1.0 / bins as f64;
    let total = x.len() as f64;
    Ok(DensityTable {
        centers: (0..bins).map(|i| (i as f64 + 0.5) * width).collect(),
        densities: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
        bin_width: width,
    })
}
