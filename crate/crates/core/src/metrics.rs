//! Spectral and error metrics.

use std::io::Write;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::operators::ComplexSequence;

/// Lowest value reported by [`nmse_db`].
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    fn coefficients(self, len: usize) -> Vec<f64> {
        let denom = (len - 1) as f64;
        (0..len)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / denom;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

/// Two-sided PSD estimate on normalized frequency `[-0.5, 0.5)`.
///
/// `psd` is a density per unit normalized frequency, so
/// `sum(psd) / segment_length` is the mean signal power.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub freqs: Vec<f64>,
    pub psd: Vec<f64>,
    pub psd_db: Vec<f64>,
    pub segment_length: usize,
    pub overlap: usize,
    pub window: Window,
    pub segments: usize,
}

impl SpectrumEstimate {
    pub fn integrated_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() / self.segment_length as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "freq,psd_db")?;
        for (f, p) in self.freqs.iter().zip(&self.psd_db) {
            writeln!(w, "{f},{p}")?;
        }
        Ok(())
    }
}

/// Welch estimate: averaged windowed periodograms of overlapping segments.
pub fn welch_psd(x: &ComplexSequence, segment_length: usize, overlap: usize, window: Window) -> Result<SpectrumEstimate> {
    if segment_length < 8 {
        return Err(Error::InvalidConfig("segment length must be at least 8".into()));
    }
    if overlap >= segment_length {
        return Err(Error::InvalidConfig("overlap must be shorter than the segment".into()));
    }
    if x.len() < segment_length {
        return Err(Error::Length {
            needed: segment_length,
            got: x.len(),
        });
    }
    let w = window.coefficients(segment_length);
    let energy: f64 = w.iter().map(|v| v * v).sum();
    let fft = FftPlanner::new().plan_fft_forward(segment_length);
    let step = segment_length - overlap;
    let mut acc = vec![0.0; segment_length];
    let mut buf = vec![Complex64::new(0.0, 0.0); segment_length];
    let mut segments = 0;
    let xs = x.samples();
    let mut start = 0;
    while start + segment_length <= xs.len() {
        for ((b, s), wv) in buf.iter_mut().zip(&xs[start..start + segment_length]).zip(&w) {
            *b = s * wv;
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let half = segment_length / 2;
    let scale = 1.0 / (energy * segments as f64);
    // fftshift: bins half.. hold the negative frequencies
    let order = (half..segment_length).chain(0..half);
    let mut freqs = Vec::with_capacity(segment_length);
    let mut psd = Vec::with_capacity(segment_length);
    for k in order {
        let f = if k >= half { k as f64 - segment_length as f64 } else { k as f64 };
        freqs.push(f / segment_length as f64);
        psd.push(acc[k] * scale);
    }
    let psd_db = psd.iter().map(|p| 10.0 * p.max(1e-300).log10()).collect();
    Ok(SpectrumEstimate {
        freqs,
        psd,
        psd_db,
        segment_length,
        overlap,
        window,
        segments,
    })
}

/// Mean in-band PSD over mean offset-band PSD, in dB.
pub fn shoulder_level_db(s: &SpectrumEstimate, in_band: (f64, f64), offset_band: (f64, f64)) -> Result<f64> {
    for (lo, hi) in [in_band, offset_band] {
        if !(lo < hi && lo >= -0.5 && hi <= 0.5) {
            return Err(Error::InvalidConfig(format!("band [{lo}, {hi}] outside [-0.5, 0.5]")));
        }
    }
    if in_band.0 < offset_band.1 && offset_band.0 < in_band.1 {
        return Err(Error::InvalidConfig("in-band and offset band overlap".into()));
    }
    let mean = |(lo, hi): (f64, f64)| -> Result<f64> {
        let sel: Vec<f64> = s
            .freqs
            .iter()
            .zip(&s.psd)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(_, p)| *p)
            .collect();
        if sel.is_empty() {
            return Err(Error::InvalidConfig(format!("band [{lo}, {hi}] selects no bins")));
        }
        Ok(sel.iter().sum::<f64>() / sel.len() as f64)
    };
    Ok(10.0 * (mean(in_band)? / mean(offset_band)?).log10())
}

/// Full cross-correlation `c[L] = sum_n a[n + L] conj(b[n])`, returned with
/// the lag of each entry, `L = -(len_b - 1) ..= len_a - 1`.
pub fn cross_correlation(a: &[Complex64], b: &[Complex64]) -> (Vec<isize>, Vec<Complex64>) {
    let n = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa = vec![Complex64::new(0.0, 0.0); n];
    let mut fb = vec![Complex64::new(0.0, 0.0); n];
    fa[..a.len()].copy_from_slice(a);
    fb[..b.len()].copy_from_slice(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    inv.process(&mut prod);
    let scale = 1.0 / n as f64;
    let lo = -(b.len() as isize - 1);
    let hi = a.len() as isize - 1;
    let lags: Vec<isize> = (lo..=hi).collect();
    let values = lags
        .iter()
        .map(|&l| prod[l.rem_euclid(n as isize) as usize] * scale)
        .collect();
    (lags, values)
}

/// Lag `L` maximizing `|sum_n a[n + L] conj(b[n])|`.
pub fn estimate_lag(a: &ComplexSequence, b: &ComplexSequence) -> isize {
    let (lags, c) = cross_correlation(a.samples(), b.samples());
    let best = c
        .iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bv), (i, v)| if v.norm() > bv { (i, v.norm()) } else { (bi, bv) })
        .0;
    lags[best]
}

fn to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// NMSE of `b` against reference `a` with `b[n]` paired to `a[n + lag]`,
/// after the optimal complex gain on the overlap.
pub fn nmse_db_at(a: &ComplexSequence, b: &ComplexSequence, lag: isize) -> Result<f64> {
    let (a, b) = (a.samples(), b.samples());
    let start = 0.max(-lag) as usize;
    let end = (b.len() as isize).min(a.len() as isize - lag);
    if end <= start as isize {
        return Err(Error::Alignment(format!("lag {lag} leaves no overlap")));
    }
    let end = end as usize;
    let pairs = || (start..end).map(|n| (a[(n as isize + lag) as usize], b[n]));
    let ref_power: f64 = pairs().map(|(x, _)| x.norm_sqr()).sum();
    if ref_power == 0.0 {
        return Err(Error::Domain("reference has zero power".into()));
    }
    let cross: Complex64 = pairs().map(|(x, y)| x * y.conj()).sum();
    let test_power: f64 = pairs().map(|(_, y)| y.norm_sqr()).sum();
    let gain = if test_power > 0.0 { cross / test_power } else { Complex64::new(0.0, 0.0) };
    let err: f64 = pairs().map(|(x, y)| (x - gain * y).norm_sqr()).sum();
    Ok(to_db(err / ref_power))
}

/// `10 log10(sum |a - gamma b|^2 / sum |a|^2)`.
///
/// With `align`, `b` is shifted by the cross-correlation peak and `gamma` is
/// the least-squares complex gain; otherwise the sequences must have equal
/// length and `gamma = 1`. Values below [`NMSE_FLOOR_DB`] are reported as the
/// floor.
pub fn nmse_db(a: &ComplexSequence, b: &ComplexSequence, align: bool) -> Result<f64> {
    if align {
        return nmse_db_at(a, b, estimate_lag(a, b));
    }
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    let ref_power: f64 = a.samples().iter().map(|s| s.norm_sqr()).sum();
    if ref_power == 0.0 {
        return Err(Error::Domain("reference has zero power".into()));
    }
    let err: f64 = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).norm_sqr()).sum();
    Ok(to_db(err / ref_power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, seed: u64) -> ComplexSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = (0..n)
            .map(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(re * s, im * s)
            })
            .collect();
        ComplexSequence::from_samples(v).unwrap()
    }

    fn tone(f: f64, n: usize) -> ComplexSequence {
        ComplexSequence::from_samples((0..n).map(|i| Complex64::from_polar(0.7, 2.0 * std::f64::consts::PI * f * i as f64)).collect())
            .unwrap()
    }

    #[test]
    fn tone_peak_location() {
        let s = welch_psd(&tone(0.125, 4096), 256, 128, Window::Hann).unwrap();
        let peak = s.psd.iter().enumerate().fold((0, 0.0), |b, (i, &p)| if p > b.1 { (i, p) } else { b }).0;
        assert!((s.freqs[peak] - 0.125).abs() <= 1.0 / 256.0);
        assert!(s.freqs.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(s.freqs[0], -0.5);
    }

    #[test]
    fn parseval() {
        let x = noise(64 * 256 + 128, 1);
        let s = welch_psd(&x, 256, 128, Window::Hann).unwrap();
        assert!((s.integrated_power() / x.mean_power() - 1.0).abs() < 0.01);
        let t = tone(0.2, 8192);
        let s = welch_psd(&t, 512, 256, Window::Hamming).unwrap();
        assert!((s.integrated_power() / t.mean_power() - 1.0).abs() < 0.01);
    }

    #[test]
    fn white_noise_is_flat() {
        // 64 non-overlapping segments
        let x = noise(64 * 128, 2);
        let s = welch_psd(&x, 128, 0, Window::Rectangular).unwrap();
        assert_eq!(s.segments, 64);
        let mean_db = 10.0 * (s.psd.iter().sum::<f64>() / s.psd.len() as f64).log10();
        let worst = s.psd_db.iter().map(|p| (p - mean_db).abs()).fold(0.0, f64::max);
        assert!(worst < 2.0, "deviation {worst} dB");
    }

    #[test]
    fn welch_argument_errors() {
        let x = noise(100, 3);
        assert!(welch_psd(&x, 4, 0, Window::Hann).is_err());
        assert!(welch_psd(&x, 64, 64, Window::Hann).is_err());
        assert!(matches!(welch_psd(&x, 128, 0, Window::Hann), Err(Error::Length { .. })));
    }

    #[test]
    fn nmse_examples() {
        let a = noise(2000, 4);
        assert_eq!(nmse_db(&a, &a, false).unwrap(), NMSE_FLOOR_DB);
        let b = a.with_samples(a.samples().iter().map(|s| s * 2.0).collect()).unwrap();
        assert!(nmse_db(&a, &b, true).unwrap() < -250.0);
        assert!((nmse_db(&a, &b, false).unwrap()).abs() < 1e-9);
        let c = noise(2000, 5);
        assert!(nmse_db(&a, &c, true).unwrap().abs() < 1.0);
        assert!(nmse_db(&a, &c, false).unwrap() > 2.0);
        let zero = ComplexSequence::from_samples(vec![Complex64::new(0.0, 0.0); 10]).unwrap();
        assert!(nmse_db(&zero, &zero, false).is_err());
        assert!(nmse_db(&a, &zero, false).is_err());
    }

    #[test]
    fn nmse_recovers_delay_and_gain() {
        let a = noise(3000, 6);
        let g = Complex64::new(0.3, -1.1);
        let b = a.with_samples(a.samples()[7..].iter().map(|s| s * g).collect()).unwrap();
        assert_eq!(estimate_lag(&a, &b), 7);
        assert!(nmse_db(&a, &b, true).unwrap() < -250.0);
        assert!(nmse_db_at(&a, &b, 0).unwrap() > -1.0);
    }

    #[test]
    fn nmse_swap_relation() {
        let a = noise(1500, 7);
        let n = noise(1500, 8);
        let b = a.with_samples(a.samples().iter().zip(n.samples()).map(|(x, y)| x * 0.8 + y * 0.3).collect()).unwrap();
        // gain-compensated NMSE is 1 - |rho|^2 in both directions
        let ab = nmse_db_at(&a, &b, 0).unwrap();
        let ba = nmse_db_at(&b, &a, 0).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        // without gain the ratio of the two is the power ratio
        let ab = nmse_db(&a, &b, false).unwrap();
        let ba = nmse_db(&b, &a, false).unwrap();
        let ratio_db = 10.0 * (a.mean_power() / b.mean_power()).log10();
        assert!((ba - ab - ratio_db).abs() < 1e-9);
    }

    fn synthetic(levels: &[(f64, f64, f64)]) -> SpectrumEstimate {
        let freqs: Vec<f64> = (0..256).map(|k| (k as f64 - 128.0) / 256.0).collect();
        let psd_db: Vec<f64> = freqs
            .iter()
            .map(|f| levels.iter().find(|(lo, hi, _)| f >= lo && f < hi).map(|l| l.2).unwrap_or(-80.0))
            .collect();
        SpectrumEstimate {
            psd: psd_db.iter().map(|d| 10f64.powf(d / 10.0)).collect(),
            freqs,
            psd_db,
            segment_length: 256,
            overlap: 0,
            window: Window::Hann,
            segments: 1,
        }
    }

    #[test]
    fn shoulder_examples() {
        let flat = synthetic(&[(-0.5, 0.5, -3.0)]);
        assert!(shoulder_level_db(&flat, (-0.1, 0.1), (0.2, 0.3)).unwrap().abs() < 1e-12);
        let s = synthetic(&[(-0.15, 0.15, 0.0), (0.15, 0.5, -40.0), (-0.5, -0.15, -40.0)]);
        assert!((shoulder_level_db(&s, (-0.1, 0.1), (0.2, 0.3)).unwrap() - 40.0).abs() < 1e-9);
        let shifted = synthetic(&[(-0.15, 0.15, 17.0), (0.15, 0.5, -23.0), (-0.5, -0.15, -23.0)]);
        assert!((shoulder_level_db(&shifted, (-0.1, 0.1), (0.2, 0.3)).unwrap() - 40.0).abs() < 1e-9);
        assert!(shoulder_level_db(&s, (-0.1, 0.1), (0.05, 0.3)).is_err());
        assert!(shoulder_level_db(&s, (-0.1, 0.1), (0.201, 0.2015)).is_err());
        assert!(shoulder_level_db(&s, (-0.6, 0.1), (0.2, 0.3)).is_err());
    }

    #[test]
    fn delay_does_not_change_psd() {
        let x = noise(40_000, 9);
        let d = x.with_samples(x.samples()[37..].to_vec()).unwrap();
        let a = welch_psd(&x, 256, 128, Window::Hann).unwrap();
        let b = welch_psd(&d, 256, 128, Window::Hann).unwrap();
        let worst = a.psd_db.iter().zip(&b.psd_db).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(worst < 1.5, "{worst}");
    }
}
