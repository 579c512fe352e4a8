use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridsel::calibrate::{calibrate, evaluate, DescentOptions, FreeParam, TargetsFile};
use gridsel::dbmodel::CostProfile;
use gridsel::hammer::{run_traced, summarize, RunReport};
use gridsel::migrate::reindex_offline;
use gridsel::namespace::{seed_catalog, write_catalog, Replica, SeedSpec};
use gridsel::scenario::{ConfigError, ScenarioConfig};
use gridsel::tablestore::{snapshot, IndexSpec};

#[derive(Parser)]
#[command(name = "gridsel", version, about = "Grid storage element load-test simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its report.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long, env = "GRIDSEL_SEED")]
        seed: Option<u64>,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
        /// Also write the station trace.
        #[arg(long)]
        trace: bool,
    },
    /// Compare run reports, optionally against calibration targets.
    Compare {
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Fit scenario constants to calibration targets.
    Calibrate {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        /// Comma-separated parameters, e.g. `t_disk,hc38:slots`.
        #[arg(long, value_delimiter = ',')]
        free: Vec<String>,
        #[arg(long, default_value_t = 60)]
        max_evals: usize,
        #[arg(long, env = "GRIDSEL_SEED")]
        seed: Option<u64>,
        #[arg(short, long, default_value = "fitted")]
        out: PathBuf,
    },
    /// Build an index on a snapshot's table without downtime.
    Migrate {
        #[arg(long)]
        table: String,
        /// `name:col,col`
        #[arg(long)]
        index: String,
        /// Pause every request kind rather than only the table's own.
        #[arg(long)]
        all_kinds: bool,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a namespace bootstrap file.
    SeedCatalog {
        #[arg(long)]
        n_files: usize,
        #[arg(long, default_value_t = 18)]
        pools: u32,
        #[arg(long, default_value_t = 1)]
        filesystems: u32,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
        #[arg(long, default_value_t = 8)]
        groups: u32,
        #[arg(long, default_value_t = 500 << 20)]
        file_size: i64,
        #[arg(long, env = "GRIDSEL_SEED", default_value_t = 1)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
    Unmet,
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::load(path).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Runtime(e.to_string()),
        _ => Failure::Invalid(e.to_string()),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(scenario: &Path, seed: Option<u64>, out: &Path, trace: bool) -> Result<(), Failure> {
    let cfg = load_scenario(scenario, seed)?;
    let (report, text) =
        run_traced(&cfg, cfg.seed, trace).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::create_dir_all(out)?;
    let stem = &cfg.name;
    fs::write(out.join(format!("{stem}.json")), report.to_json())?;
    fs::write(out.join(format!("{stem}_transfers.csv")), report.transfers_csv())?;
    fs::write(out.join(format!("{stem}_utilisation.csv")), report.utilisation_csv())?;
    if let Some(t) = text {
        fs::write(out.join(format!("{stem}.trace")), t)?;
    }
    let s = &report.summary;
    println!(
        "{}: {} jobs, mean event rate {:.3} Hz, efficiency {:.3}, peak bucket {} ok / {} failed",
        s.name,
        s.jobs_finished,
        s.mean_event_rate,
        s.mean_efficiency,
        s.peak_success_bucket,
        s.peak_failure_bucket
    );
    Ok(())
}

fn compare(reports: &[PathBuf], targets: Option<&Path>) -> Result<(), Failure> {
    let mut loaded = Vec::new();
    for p in reports {
        let text = fs::read_to_string(p)?;
        let r: RunReport = serde_json::from_str(&text)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?;
        loaded.push(r);
    }
    let refs: Vec<&RunReport> = loaded.iter().collect();
    let c = summarize(&refs);
    print!("{c}");
    if let Some(t) = targets {
        let t = TargetsFile::load(t).map_err(|e| Failure::Invalid(e.to_string()))?;
        let ev = evaluate(&t.targets, &c);
        println!();
        print!("{ev}");
        if !ev.all_pass {
            return Err(Failure::Unmet);
        }
    }
    Ok(())
}

fn calibrate_cmd(
    targets: &Path,
    scenarios: &[PathBuf],
    free: &[String],
    max_evals: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let t = TargetsFile::load(targets).map_err(|e| Failure::Invalid(e.to_string()))?;
    let cfgs = scenarios
        .iter()
        .map(|p| load_scenario(p, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let free: Vec<FreeParam> = free.iter().map(|s| FreeParam::parse(s)).collect();
    for p in &free {
        if p.get(&cfgs).is_err() {
            return Err(Failure::Invalid(format!("unknown parameter `{}`", p.label())));
        }
    }
    let opts = DescentOptions {
        max_evals,
        ..DescentOptions::default()
    };
    let fit = calibrate(&cfgs, &t.targets, &free, &opts)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::create_dir_all(out)?;
    for c in &fit.scenarios {
        fs::write(out.join(format!("{}.cfg", c.name)), c.to_toml())?;
    }
    let costs: Vec<(&str, &CostProfile)> =
        fit.scenarios.iter().map(|c| (c.name.as_str(), &c.costs)).collect();
    let doc = serde_json::json!({
        "params": fit.params,
        "costs": costs,
        "evaluation": fit.evaluation,
        "evaluations": fit.evals,
    });
    fs::write(
        out.join("fit.json"),
        serde_json::to_string_pretty(&doc).expect("json"),
    )?;
    for (n, v) in &fit.params {
        println!("{n} = {v}");
    }
    print!("{}", fit.evaluation);
    println!("max relative error {:.4}", fit.evaluation.max_error);
    if fit.evaluation.all_pass {
        Ok(())
    } else {
        Err(Failure::Unmet)
    }
}

fn migrate(
    table: &str,
    index: &str,
    all_kinds: bool,
    snap: &Path,
    report: &Path,
) -> Result<(), Failure> {
    let (name, cols) = index
        .split_once(':')
        .ok_or_else(|| Failure::Invalid(format!("--index `{index}`: expected name:col,col")))?;
    let cols: Vec<&str> = cols.split(',').filter(|c| !c.is_empty()).collect();
    if name.is_empty() || cols.is_empty() {
        return Err(Failure::Invalid(format!("--index `{index}`: expected name:col,col")));
    }
    let mut store = snapshot::load(snap).map_err(|e| Failure::Invalid(e.to_string()))?;
    let r = reindex_offline(
        &mut store,
        table,
        &IndexSpec::new(name, cols),
        &CostProfile::default(),
    )
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    snapshot::save(&store, snap)?;
    let mut doc = serde_json::to_value(&r).expect("json");
    doc["pause_scope"] = if all_kinds { "all" } else { "table" }.into();
    fs::write(report, serde_json::to_string_pretty(&doc).expect("json"))?;
    println!(
        "{}: {} -> boundary {} ({} + {} rows), verified {}",
        r.table, r.index, r.boundary_rowid, r.rows_precopied, r.rows_tailcopied, r.verified
    );
    if r.verified {
        Ok(())
    } else {
        Err(Failure::Runtime("verification failed".into()))
    }
}

#[allow(clippy::too_many_arguments)]
fn seed_cmd(
    n_files: usize,
    pools: u32,
    filesystems: u32,
    replicas: usize,
    groups: u32,
    file_size: i64,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    if pools == 0 || filesystems == 0 {
        return Err(Failure::Invalid("need at least one pool and filesystem".into()));
    }
    let fs_list: Vec<Replica> = (0..pools)
        .flat_map(|p| (1..=filesystems).map(move |f| Replica::new(format!("pool{p:02}"), format!("fs{f}"))))
        .collect();
    let entries = seed_catalog(
        &SeedSpec {
            n_files,
            n_groups: groups,
            file_size,
            replicas_per_file: replicas,
        },
        &fs_list,
        seed,
    );
    let f = fs::File::create(out)?;
    write_catalog(&entries, std::io::BufWriter::new(f))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            trace,
        } => run(scenario, *seed, out, *trace),
        Cmd::Compare { reports, targets } => compare(reports, targets.as_deref()),
        Cmd::Calibrate {
            targets,
            scenarios,
            free,
            max_evals,
            seed,
            out,
        } => calibrate_cmd(targets, scenarios, free, *max_evals, *seed, out),
        Cmd::Migrate {
            table,
            index,
            all_kinds,
            snapshot,
            report,
        } => migrate(table, index, *all_kinds, snapshot, report),
        Cmd::SeedCatalog {
            n_files,
            pools,
            filesystems,
            replicas,
            groups,
            file_size,
            seed,
            out,
        } => seed_cmd(
            *n_files,
            *pools,
            *filesystems,
            *replicas,
            *groups,
            *file_size,
            *seed,
            out,
        ),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Unmet) => ExitCode::from(3),
    }
}
