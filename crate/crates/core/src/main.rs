use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fab_core::harness::{self, table1, ExperimentConfig, SweepSpec};
use fab_core::mixing::{to_csv, validate_pair, MixingPair};
use fab_core::{digraph, FabError};

#[derive(Parser)]
#[command(name = "fab", version, about = "Decentralized bilevel optimization over time-varying digraphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// `key.path=value` overrides applied to the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (overrides `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics to write as plot files in the output directory.
        #[arg(long)]
        plot: Vec<String>,
        #[arg(long)]
        log_scale: bool,
    },
    /// Run a parameter grid and print a CSV table.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every mixing pair of a schedule over the configured horizon.
    ValidateTopology {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory for one period of edge lists and matrices.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Sensitivity table on the policy-evaluation task.
    Table1 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quick invariant suite.
    Selftest,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_MISMATCH: u8 = 3;

fn fail(e: FabError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e {
        FabError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, overrides, out, plot, log_scale } => {
            let cfg = match ExperimentConfig::load(&config, &overrides) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let res = match harness::run_experiment(&cfg) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            print!("{}", res.summary.render());
            if let Some(dir) = out.or(cfg.output.clone()) {
                if let Err(e) = res.write_to(&dir) {
                    return fail(e);
                }
                for m in &plot {
                    if let Err(e) = harness::emit_plotdata(std::slice::from_ref(&res), &cfg.name, m, log_scale, &dir) {
                        return fail(e);
                    }
                }
            }
            if res.summary.divergence.is_some() {
                return ExitCode::from(EXIT_DIVERGENCE);
            }
            ExitCode::SUCCESS
        }
        Cmd::Sweep { config, out } => {
            let spec = match SweepSpec::load(&config) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let cells = match harness::run_sweep(&spec) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let table = harness::sweep_table(&spec, &cells);
            print!("{table}");
            if let Some(path) = out {
                if let Err(e) = std::fs::write(&path, &table) {
                    return fail(e.into());
                }
            }
            ExitCode::SUCCESS
        }
        Cmd::ValidateTopology { config, overrides, dump } => match validate_topology(&config, &overrides, dump) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(EXIT_CONFIG),
            Err(e) => fail(e),
        },
        Cmd::Table1 { seed } => {
            let res = match table1::run_table1(seed) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            print!("{}", table1::render_markdown(&res));
            let c = table1::check(&res);
            println!("\n{c:?}");
            if c.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_MISMATCH)
            }
        }
        Cmd::Selftest => {
            let ok = fab_core::selftest::run(|line| println!("{line}"));
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_MISMATCH)
            }
        }
    }
}

fn validate_topology(path: &std::path::Path, overrides: &[String], dump: Option<PathBuf>) -> fab_core::Result<bool> {
    let cfg = ExperimentConfig::load(path, overrides)?;
    let sched = cfg.schedule()?;
    let scheme = cfg.topology.scheme;
    let mut worst_row = 0.0f64;
    let mut worst_col = 0.0f64;
    let mut violations = 0usize;
    let (mut a_min, mut b_min) = (f64::INFINITY, f64::INFINITY);
    let mut max_diam = 0;
    if let Some(d) = &dump {
        std::fs::create_dir_all(d)?;
    }
    for k in 0..cfg.iterations {
        let g = sched.graph_at(k)?;
        let m = MixingPair::from_graph(&g, scheme)?;
        let rep = validate_pair(&m, &g)?;
        worst_row = worst_row.max(rep.max_row_deviation);
        worst_col = worst_col.max(rep.max_col_deviation);
        violations += rep.violations.len();
        a_min = a_min.min(rep.a_min);
        b_min = b_min.min(rep.b_min);
        max_diam = max_diam.max(digraph::diameter(&g)?);
        if let (Some(d), true) = (&dump, k < sched.period()) {
            std::fs::write(d.join(format!("graph_{k}.txt")), g.to_edge_list())?;
            std::fs::write(d.join(format!("A_{k}.csv")), to_csv(&m.a))?;
            std::fs::write(d.join(format!("B_{k}.csv")), to_csv(&m.b))?;
        }
    }
    let mut ok = worst_row <= 1e-12 && worst_col <= 1e-12 && violations == 0 && a_min > 0.0 && b_min > 0.0;
    println!("steps {}", cfg.iterations);
    println!("period {}", sched.period());
    println!("max_row_sum_dev {worst_row:.3e}");
    println!("max_col_sum_dev {worst_col:.3e}");
    println!("violations {violations}");
    println!("a_min {a_min}");
    println!("b_min {b_min}");
    println!("max_diameter {max_diam}");
    for (name, target, got) in [("a_min", cfg.topology.a_min_target, a_min), ("b_min", cfg.topology.b_min_target, b_min)] {
        if let Some(t) = target {
            let met = got >= t;
            ok &= met;
            println!("{name}_target {t} {}", if met { "met" } else { "missed" });
        }
    }
    println!("status {}", if ok { "pass" } else { "fail" });
    Ok(ok)
}
