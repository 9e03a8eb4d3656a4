use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use wats_core::basisfn::BasisSpec;
use wats_core::harness::{self, AnalysisOptions, SweepConfig};
use wats_core::inference::Alternative;

#[derive(Parser)]
#[command(name = "wats", version, about = "Scalar summaries of longitudinal trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation sweep and write rejection tables.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config replicate count.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Fit and compare the two groups of a dataset.
    Analyze {
        #[command(flatten)]
        common: DataArgs,
        /// Skip the WATS weight estimation.
        #[arg(long)]
        no_weights: bool,
    },
    /// Estimate the WATS weight function only.
    Weights {
        #[command(flatten)]
        common: DataArgs,
    },
    /// Check a config file and/or a dataset without running anything.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// CSV with header subject_id,group,time,value.
    #[arg(long)]
    data: PathBuf,
    /// JSON analysis options; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Degree of a polynomial trajectory basis.
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long, value_enum)]
    alternative: Option<Alt>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alt {
    FirstLower,
    FirstHigher,
}

impl DataArgs {
    fn options(&self) -> Result<AnalysisOptions> {
        let mut opts = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => AnalysisOptions::default(),
        };
        if let Some(s) = self.seed {
            opts.seed = s;
        }
        if let Some(d) = self.degree {
            opts.basis = Some(BasisSpec::Polynomial { degree: d });
        }
        if let Some(a) = self.alternative {
            opts.alternative = match a {
                Alt::FirstLower => Alternative::FirstLower,
                Alt::FirstHigher => Alternative::FirstHigher,
            };
        }
        Ok(opts)
    }
}

fn load_data(path: &Path) -> Result<wats_core::data::LongitudinalDataset> {
    harness::ingest_csv(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Simulate { config, seed, reps, out_dir } => {
            let mut cfg = SweepConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = reps {
                cfg.reps = r;
            }
            let out = harness::run_sweep(&cfg)?;
            harness::write_sweep(&out_dir, &out)?;
            for row in &out.rows {
                println!(
                    "{:<8} sigma={:<4} {:<8} {:<4} {:<7} rate={:.3} se={:.3} failures={}",
                    row.scenario, row.sigma, row.missingness, row.handling, row.estimator, row.rate, row.se, row.failures
                );
            }
            for f in &out.manifest.flagged {
                eprintln!("warning: {} {}: {}/{} replicates failed", f.cell, f.estimator, f.failures, f.reps);
            }
            println!("wrote {} rows to {}", out.rows.len(), out_dir.display());
        }
        Command::Analyze { common, no_weights } => {
            let data = load_data(&common.data)?;
            let mut opts = common.options()?;
            if no_weights {
                opts.weights = false;
            }
            let report = harness::analyze(&data, &opts)?;
            std::fs::create_dir_all(&common.out_dir)?;
            std::fs::write(common.out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            if let Some(w) = &report.weights {
                harness::write_weight_outputs(&common.out_dir, w, &report.groups)?;
            }
            println!("groups: {} vs {}", report.groups[0], report.groups[1]);
            for c in &report.comparisons {
                println!(
                    "{:<7} effect={:+.4} stat={:+.3} p(two-sided)={:.4} p(one-sided)={:.4}",
                    c.estimator.label(),
                    c.effect,
                    c.test.statistic,
                    c.test.p_two_sided,
                    c.test.p_one_sided
                );
            }
            println!("LRT     stat={:.3} df={} p={:.4}", report.lrt.statistic, report.lrt_df, report.lrt.p_two_sided);
            if let Some(w) = &report.weights {
                println!(
                    "WMC     stat={:+.3} p(two-sided)={:.4} p(one-sided)={:.4}{}",
                    w.test.statistic,
                    w.test.p_two_sided,
                    w.test.p_one_sided,
                    if w.fallback { " (uniform weight)" } else { "" }
                );
            }
            println!("wrote report to {}", common.out_dir.display());
        }
        Command::Weights { common } => {
            let data = load_data(&common.data)?;
            let report = harness::estimate_weights(&data, &common.options()?)?;
            harness::write_weight_outputs(&common.out_dir, &report, &data.groups)?;
            std::fs::write(common.out_dir.join("weights.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "objective={:.4} uniform={:.4}{}",
                report.objective,
                report.uniform_objective,
                if report.fallback { " (fell back to uniform)" } else { "" }
            );
        }
        Command::Validate { config, data } => {
            if config.is_none() && data.is_none() {
                bail!("nothing to validate: pass --config and/or --data");
            }
            if let Some(p) = config {
                let cfg = SweepConfig::load(&p).with_context(|| format!("loading {}", p.display()))?;
                let cells = cfg.cells()?;
                println!("{}: {} cells, {} replicates each", p.display(), cells.len(), cfg.reps);
            }
            if let Some(p) = data {
                let d = load_data(&p)?;
                println!(
                    "{}: {} subjects, {} groups, {} observations, grid {:?}",
                    p.display(),
                    d.subjects.len(),
                    d.n_groups(),
                    d.n_observations(),
                    d.grid.points()
                );
            }
        }
    }
    Ok(())
}
