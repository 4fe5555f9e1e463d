use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sepdpd_cli::{compare_runs, run_experiment, CliError, ExperimentConfig};
use sepdpd_core::basis::{write_lut_binary, write_lut_csv};
use sepdpd_core::PredistorterMatrix;

#[derive(Parser)]
#[command(name = "sepdpd", version, about = "Separable-function digital predistortion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a predistorter for a scenario and write its artifacts.
    Run {
        config: PathBuf,
        /// Overrides the waveform and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two run reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the comparison as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Tabulate a polynomial predistorter file into LUT entries.
    ExportLut {
        predistorter: PathBuf,
        size: usize,
        /// Output directory; defaults to `<file stem>_lut<size>` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let (mut cfg, base) = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let result = run_experiment(&cfg, &base, out.as_deref())?;
            let s = &result.report.summary;
            println!("scenario            {}", result.report.scenario_name);
            println!("nmse without dpd    {:.2} dB", s.baseline_nmse_db);
            println!("nmse with dpd       {:.2} dB", s.final_nmse_db);
            println!("nmse with lut       {:.2} dB", s.lut_nmse_db);
            println!("shoulder input      {:.2} dB", s.shoulder_input_db);
            println!("shoulder no dpd     {:.2} dB", s.shoulder_without_dpd_db);
            println!("shoulder with dpd   {:.2} dB", s.shoulder_with_dpd_db);
            println!("outputs             {}", result.output_dir.display());
            for w in &result.report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Compare { a, b, csv } => {
            let cmp = compare_runs(&a, &b)?;
            print!("{}", cmp.to_table());
            if let Some(path) = csv {
                fs::write(&path, cmp.to_csv()).map_err(|e| CliError::Io { path, source: e })?;
            }
        }
        Command::ExportLut { predistorter, size, out } => export_lut(&predistorter, size, out)?,
    }
    Ok(())
}

fn export_lut(path: &Path, size: usize, out: Option<PathBuf>) -> Result<(), CliError> {
    let file_err = |source| CliError::File {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let pd = PredistorterMatrix::read(BufReader::new(file)).map_err(file_err)?;
    let (lut, max_error) = pd.to_luts(size).map_err(file_err)?;
    let dir = out.unwrap_or_else(|| {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("predistorter");
        path.with_file_name(format!("{stem}_lut{size}"))
    });
    fs::create_dir_all(&dir).map_err(|e| CliError::Io {
        path: dir.clone(),
        source: e,
    })?;
    let create = |name: String| {
        let p = dir.join(name);
        fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| CliError::Io { path: p, source: e })
    };
    let write_err = |source| CliError::File {
        path: dir.clone(),
        source,
    };
    lut.write(create("predistorter_lut.txt".into())?).map_err(write_err)?;
    for k in 0..lut.rows() {
        for q in 0..lut.depth() {
            write_lut_csv(lut.entry(k, q), create(format!("p{}{}.csv", k + 1, q + 1))?).map_err(write_err)?;
            write_lut_binary(lut.entry(k, q), create(format!("p{}{}.bin", k + 1, q + 1))?).map_err(write_err)?;
        }
    }
    println!("wrote {} ({} entries of {size} points, max tabulation error {max_error:.3e})", dir.display(), lut.rows() * lut.depth());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
