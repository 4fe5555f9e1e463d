//! Running a scenario and persisting its artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use sepdpd_core::basis::{normalize_for_plot, write_lut_binary, write_lut_csv};
use sepdpd_core::metrics::nmse_db_at;
use sepdpd_core::training::{indirect_learning_loop, AdaptationRun};
use sepdpd_core::{shoulder_level_db, welch_psd, Operator, PredistorterMatrix};

use crate::config::{ExperimentConfig, Resolved, WaveformSection};
use crate::error::CliError;

/// Summary written to `report.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_name: String,
    pub structure: String,
    pub solver: String,
    pub seed: u64,
    pub hpa_kind: String,
    pub hpa_unit_gain_scale: f64,
    pub waveform: WaveformSection,
    pub summary: Summary,
    pub warnings: Vec<String>,
    /// Every file the run wrote, relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub baseline_nmse_db: f64,
    pub final_nmse_db: f64,
    pub nmse_improvement_db: f64,
    pub lut_nmse_db: f64,
    pub lut_max_error: f64,
    pub shoulder_input_db: f64,
    pub shoulder_without_dpd_db: f64,
    pub shoulder_with_dpd_db: f64,
    pub compensated_lag: usize,
    pub estimated_lag: i64,
    pub adaptation_iterations: usize,
    pub clamp_count: usize,
}

pub struct ExperimentResult {
    pub report: RunReport,
    pub output_dir: PathBuf,
    pub run: AdaptationRun,
}

/// Records files as they are written so that the report can list them.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn write<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> sepdpd_core::Result<()>,
    {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).map_err(|e| CliError::File {
            path: path.clone(),
            source: e,
        })?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }
}

/// Runs the indirect-learning loop for `cfg` and writes all artifacts into
/// `output_dir` (the config's `outputs` when `None`).
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, output_dir: Option<&Path>) -> Result<ExperimentResult, CliError> {
    let resolved = cfg.resolve(base)?;
    let ctx = |e: sepdpd_core::Error| CliError::Scenario {
        scenario: cfg.scenario_name.clone(),
        source: e,
    };
    let Resolved {
        waveform,
        model,
        spec,
        lut_size,
        training,
        window,
        in_band,
        offset_band,
    } = &resolved;
    info!("scenario {}: {} passes", cfg.scenario_name, training.adaptation_iterations);
    let run = indirect_learning_loop(model, waveform, spec, training).map_err(ctx)?;
    let e = &run.evaluation;

    let seg = cfg.metrics.segment_length;
    let overlap = cfg.metrics.overlap;
    let input_psd = welch_psd(&e.input, seg, overlap, *window).map_err(ctx)?;
    let without_psd = welch_psd(&e.without_dpd, seg, overlap, *window).map_err(ctx)?;
    let with_psd = welch_psd(&e.with_dpd, seg, overlap, *window).map_err(ctx)?;
    let shoulder = |s| shoulder_level_db(s, *in_band, *offset_band).map_err(ctx);

    let (lut_matrix, lut_max_error) = run.final_matrix.to_luts(*lut_size).map_err(ctx)?;
    let lut_output = model.apply(&lut_matrix.apply(&e.input).map_err(ctx)?).map_err(ctx)?;
    let lut_nmse_db = nmse_db_at(&e.input, &lut_output, e.compensated_lag as isize).map_err(ctx)?;

    let dir = output_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.outputs.clone());
    fs::create_dir_all(&dir).map_err(|err| CliError::io(&dir, err))?;
    let mut out = Outputs {
        dir: dir.clone(),
        written: Vec::new(),
    };
    out.write("spectrum_input.csv", |w| input_psd.write_csv(w))?;
    out.write("spectrum_without_dpd.csv", |w| without_psd.write_csv(w))?;
    out.write("spectrum_with_dpd.csv", |w| with_psd.write_csv(w))?;
    out.write("objective_trace.csv", |w| {
        writeln!(w, "pass,iteration,objective")?;
        for (pass, fit) in run.fits.iter().enumerate() {
            for (it, v) in fit.objective_trace.iter().enumerate() {
                writeln!(w, "{pass},{it},{v}")?;
            }
        }
        Ok(())
    })?;
    out.write("adaptation.csv", |w| {
        writeln!(w, "pass,cascade_nmse_db,fit_residual_db")?;
        for (pass, c) in run.cascade_nmse_db.iter().enumerate() {
            match run.residual_nmse_db.get(pass) {
                Some(r) => writeln!(w, "{pass},{c},{r}")?,
                None => writeln!(w, "{pass},{c},")?,
            }
        }
        Ok(())
    })?;
    out.write("predistorter.txt", |w| run.final_matrix.write(w))?;
    out.write("predistorter_lut.txt", |w| lut_matrix.write(w))?;
    for k in 0..lut_matrix.rows() {
        for q in 0..lut_matrix.depth() {
            let f = lut_matrix.entry(k, q);
            out.write(&format!("lut/p{}{}.csv", k + 1, q + 1), |w| write_lut_csv(f, w))?;
            out.write(&format!("lut/p{}{}.bin", k + 1, q + 1), |w| write_lut_binary(f, w))?;
        }
    }
    write_normalized(&mut out, &run.final_matrix)?;

    let report = RunReport {
        scenario_name: cfg.scenario_name.clone(),
        structure: spec.structure.name().to_string(),
        solver: cfg.training.solver.clone(),
        seed: cfg.waveform.seed,
        hpa_kind: model.kind().to_string(),
        hpa_unit_gain_scale: model.unit_gain_scale(),
        waveform: cfg.waveform.clone(),
        summary: Summary {
            baseline_nmse_db: e.baseline_nmse_db,
            final_nmse_db: e.final_nmse_db,
            nmse_improvement_db: e.baseline_nmse_db - e.final_nmse_db,
            lut_nmse_db,
            lut_max_error,
            shoulder_input_db: shoulder(&input_psd)?,
            shoulder_without_dpd_db: shoulder(&without_psd)?,
            shoulder_with_dpd_db: shoulder(&with_psd)?,
            compensated_lag: e.compensated_lag,
            estimated_lag: e.estimated_lag as i64,
            adaptation_iterations: training.adaptation_iterations,
            clamp_count: run.clamp_count,
        },
        warnings: run.warnings.clone(),
        files: out.written.clone(),
    };
    let text = toml::to_string(&report).expect("report serializes");
    let report_path = dir.join("report.toml");
    fs::write(&report_path, text).map_err(|err| CliError::io(&report_path, err))?;
    Ok(ExperimentResult {
        report,
        output_dir: dir,
        run,
    })
}

/// Unit-norm entries on a 256-point grid plus the factors removed from them.
/// Product rows fold the norms into `a_k`; additive entries report their own
/// norm.
fn write_normalized(out: &mut Outputs, pd: &PredistorterMatrix) -> Result<(), CliError> {
    const POINTS: usize = 256;
    let basis = pd.basis();
    let mut functions = Vec::new();
    let mut norms = Vec::new();
    for k in 0..pd.rows() {
        for q in 0..pd.depth() {
            // an identically zero entry is plotted as zero
            let (f, norm) = match normalize_for_plot(pd.entry(k, q), basis) {
                Ok(v) => v,
                Err(sepdpd_core::Error::Normalization(_)) => (pd.entry(k, q).clone(), Complex64::new(0.0, 0.0)),
                Err(e) => {
                    return Err(CliError::File {
                        path: out.dir.join("functions.csv"),
                        source: e,
                    })
                }
            };
            norms.push(norm);
            functions.push(f);
        }
    }
    out.write("functions.csv", |w| {
        writeln!(w, "k,q,r,re,im,magnitude")?;
        for k in 0..pd.rows() {
            for q in 0..pd.depth() {
                let f = &functions[k * pd.depth() + q];
                for i in 0..POINTS {
                    let r = i as f64 / (POINTS - 1) as f64;
                    let (v, _) = f.eval(basis, r);
                    writeln!(w, "{},{},{r},{},{},{}", k + 1, q + 1, v.re, v.im, v.norm())?;
                }
            }
        }
        Ok(())
    })?;
    out.write("scales.csv", |w| {
        if pd.structure().is_product() {
            writeln!(w, "k,re,im,magnitude")?;
            for k in 0..pd.rows() {
                let a = (0..pd.depth()).fold(pd.scales()[k], |a, q| a * norms[k * pd.depth() + q]);
                writeln!(w, "{},{},{},{}", k + 1, a.re, a.im, a.norm())?;
            }
        } else {
            writeln!(w, "k,q,re,im,magnitude")?;
            for k in 0..pd.rows() {
                for q in 0..pd.depth() {
                    let a = pd.scales()[k] * norms[k * pd.depth() + q];
                    writeln!(w, "{},{},{},{},{}", k + 1, q + 1, a.re, a.im, a.norm())?;
                }
            }
        }
        Ok(())
    })
}

/// Reads a `report.toml`.
pub fn load_report(path: &Path) -> Result<RunReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config(path, e.to_string()))
}
