//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `waveform`, `hpa`,
//! `predistorter`, `training` and `metrics`. Relative paths inside it are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use sepdpd_core::hpa::load_coefficients;
use sepdpd_core::training::PredistorterSpec;
use sepdpd_core::{HpaModel, Modulation, Solver, StaticCurve, Structure, TrainingConfig, WaveformConfig, WaveformKind, Window};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario_name: String,
    /// Output directory, relative to the working directory.
    pub outputs: PathBuf,
    pub waveform: WaveformSection,
    pub hpa: HpaSection,
    pub predistorter: PredistorterSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveformSection {
    pub kind: String,
    pub num_subcarriers: usize,
    pub modulation: Option<String>,
    pub oversampling: usize,
    pub num_samples: usize,
    pub peak_normalization: f64,
    pub seed: u64,
    pub guard_fraction: f64,
    pub edge_ramp: usize,
    pub rolloff: f64,
}

impl Default for WaveformSection {
    fn default() -> Self {
        let d = WaveformConfig::default();
        WaveformSection {
            kind: "multicarrier_ofdm".into(),
            num_subcarriers: d.num_subcarriers,
            modulation: Some("qam16".into()),
            oversampling: d.oversampling,
            num_samples: d.num_samples,
            peak_normalization: d.peak_normalization,
            seed: d.seed,
            guard_fraction: d.guard_fraction,
            edge_ramp: d.edge_ramp,
            rolloff: d.rolloff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpaSection {
    /// `identity`, `memory_polynomial`, `memory_polynomial_cross`, `rapp` or `cubic`.
    pub kind: String,
    pub coefficients: Option<PathBuf>,
    /// `[re, im]` gain of the cross term.
    pub cross_gain: Option<[f64; 2]>,
    pub saturation: Option<f64>,
    pub smoothness: Option<f64>,
    pub k3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredistorterSection {
    pub structure: String,
    pub rows: usize,
    pub depth: usize,
    pub degree_count: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_lut")]
    pub lut_size: usize,
}

fn default_bins() -> usize {
    256
}

fn default_lut() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub solver: String,
    pub samples_per_iteration: usize,
    pub max_iterations: usize,
    pub adaptation_iterations: usize,
    pub convergence_tol: f64,
    pub inner_ls_regularization: f64,
    pub seed: u64,
    pub scg_inner_steps: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        TrainingSection {
            solver: "als".into(),
            samples_per_iteration: d.samples_per_iteration,
            max_iterations: d.max_iterations,
            adaptation_iterations: d.adaptation_iterations,
            convergence_tol: d.convergence_tol,
            inner_ls_regularization: d.inner_ls_regularization,
            seed: d.seed,
            scg_inner_steps: d.scg_inner_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub segment_length: usize,
    pub overlap: usize,
    pub window: String,
    /// Defaults to `|f| <= 0.4 / oversampling`.
    pub in_band: Option<[f64; 2]>,
    /// Defaults to `0.6 / oversampling ..= 0.9 / oversampling`.
    pub offset_band: Option<[f64; 2]>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            segment_length: 1024,
            overlap: 512,
            window: "hann".into(),
            in_band: None,
            offset_band: None,
        }
    }
}

/// A config resolved into the library types.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub waveform: WaveformConfig,
    pub model: HpaModel,
    pub spec: PredistorterSpec,
    pub lut_size: usize,
    pub training: TrainingConfig,
    pub window: Window,
    pub in_band: (f64, f64),
    pub offset_band: (f64, f64),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::config(path, e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Sets the waveform and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.waveform.seed = seed;
        self.training.seed = seed;
        self
    }

    /// Validates the config and builds the library objects. `base` resolves
    /// relative file references.
    pub fn resolve(&self, base: &Path) -> Result<Resolved, CliError> {
        let bad = |m: String| CliError::Scenario {
            scenario: self.scenario_name.clone(),
            source: sepdpd_core::Error::InvalidConfig(m),
        };
        let w = &self.waveform;
        let kind = match w.kind.as_str() {
            "multicarrier_ofdm" => WaveformKind::MulticarrierOfdm,
            "filtered_qam" => WaveformKind::FilteredQam,
            "tones" => WaveformKind::Tones,
            other => return Err(bad(format!("unknown waveform kind `{other}`"))),
        };
        let modulation = match w.modulation.as_deref() {
            None => None,
            Some("qpsk") => Some(Modulation::Qpsk),
            Some("qam16") => Some(Modulation::Qam16),
            Some(other) => return Err(bad(format!("unknown modulation `{other}`"))),
        };
        let waveform = WaveformConfig {
            kind,
            num_subcarriers: w.num_subcarriers,
            modulation,
            oversampling: w.oversampling,
            num_samples: w.num_samples,
            peak_normalization: w.peak_normalization,
            seed: w.seed,
            guard_fraction: w.guard_fraction,
            edge_ramp: w.edge_ramp,
            rolloff: w.rolloff,
        };
        waveform.validate().map_err(|e| self.context(e))?;

        let model = self.model(base)?;

        let p = &self.predistorter;
        let structure: Structure = p.structure.parse().map_err(|e| self.context(e))?;
        let spec = PredistorterSpec {
            structure,
            rows: p.rows,
            depth: p.depth,
            degree_count: p.degree_count,
            histogram_bins: p.histogram_bins,
        };
        spec.validate().map_err(|e| self.context(e))?;
        if p.lut_size < 2 {
            return Err(bad("lut_size must be at least 2".into()));
        }

        let t = &self.training;
        let solver = match t.solver.as_str() {
            "als" => Solver::Als,
            "scg" => Solver::Scg,
            other => return Err(bad(format!("unknown solver `{other}`"))),
        };
        let training = TrainingConfig {
            samples_per_iteration: t.samples_per_iteration,
            max_iterations: t.max_iterations,
            adaptation_iterations: t.adaptation_iterations,
            solver,
            convergence_tol: t.convergence_tol,
            inner_ls_regularization: t.inner_ls_regularization,
            seed: t.seed,
            scg_inner_steps: t.scg_inner_steps,
        };
        training.validate().map_err(|e| self.context(e))?;

        let m = &self.metrics;
        let window = match m.window.as_str() {
            "hann" => Window::Hann,
            "hamming" => Window::Hamming,
            "rectangular" => Window::Rectangular,
            other => return Err(bad(format!("unknown window `{other}`"))),
        };
        let edge = 0.5 / w.oversampling as f64;
        let in_band = m.in_band.map(|b| (b[0], b[1])).unwrap_or((-0.8 * edge, 0.8 * edge));
        let offset_band = m.offset_band.map(|b| (b[0], b[1])).unwrap_or((1.2 * edge, 1.8 * edge));
        if m.segment_length > waveform.num_samples {
            return Err(bad(format!(
                "segment length {} exceeds the {} evaluation samples",
                m.segment_length, waveform.num_samples
            )));
        }
        Ok(Resolved {
            waveform,
            model,
            spec,
            lut_size: p.lut_size,
            training,
            window,
            in_band,
            offset_band,
        })
    }

    fn model(&self, base: &Path) -> Result<HpaModel, CliError> {
        let h = &self.hpa;
        let bad = |m: String| CliError::Scenario {
            scenario: self.scenario_name.clone(),
            source: sepdpd_core::Error::InvalidConfig(m),
        };
        let coefficients = || -> Result<_, CliError> {
            let rel = h
                .coefficients
                .as_ref()
                .ok_or_else(|| bad(format!("hpa kind `{}` needs a coefficient file", h.kind)))?;
            let path = base.join(rel);
            if !path.exists() {
                return Err(CliError::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "coefficient file not found")));
            }
            load_coefficients(&path).map_err(|e| CliError::File { path, source: e })
        };
        let raw = match h.kind.as_str() {
            "identity" => return Ok(HpaModel::identity()),
            "memory_polynomial" => HpaModel::memory_polynomial(coefficients()?),
            "memory_polynomial_cross" => {
                let g = h.cross_gain.ok_or_else(|| bad("memory_polynomial_cross needs cross_gain".into()))?;
                HpaModel::memory_polynomial_cross(coefficients()?, Complex64::new(g[0], g[1]))
            }
            "rapp" => {
                let (Some(saturation), Some(smoothness)) = (h.saturation, h.smoothness) else {
                    return Err(bad("rapp needs saturation and smoothness".into()));
                };
                HpaModel::static_nonlinearity(StaticCurve::Rapp { saturation, smoothness }).map_err(|e| self.context(e))?
            }
            "cubic" => {
                let k3 = h.k3.ok_or_else(|| bad("cubic needs k3".into()))?;
                HpaModel::static_nonlinearity(StaticCurve::Cubic { k3 }).map_err(|e| self.context(e))?
            }
            other => return Err(bad(format!("unknown hpa kind `{other}`"))),
        };
        raw.normalize_unit_gain().map_err(|e| self.context(e))
    }

    fn context(&self, source: sepdpd_core::Error) -> CliError {
        CliError::Scenario {
            scenario: self.scenario_name.clone(),
            source,
        }
    }
}
