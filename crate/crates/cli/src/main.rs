use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kneeseg::data_model::{load_manifest, CLASS_NAMES};
use kneeseg::error::{Error, Result};
use kneeseg::evaluation::{read_profile_csv, read_report_csv, render_profiles_png, write_comparison, Comparison, ProfileOptions};
use kneeseg::phantom::{generate_benchmark, BenchmarkSpec, Gap, Scale};
use kneeseg::training::run::{create_run_dir, finalize_run, load_run_config, load_run_models, RunRecord};
use kneeseg::training::{evaluate_models, run_experiment, ExperimentConfig};

/// Environment variable overriding the default output root (`./runs`).
const OUT_ROOT_ENV: &str = "KNEESEG_OUT_ROOT";

#[derive(Parser)]
#[command(name = "kneeseg", version, about = "Phantom generation, training and evaluation of knee tissue segmenters")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic benchmark data.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Train every fold of an experiment into a new run directory.
    Train(TrainArgs),
    /// Ensemble the run's folds on the test scans and write tables and plots.
    Evaluate(EvaluateArgs),
    /// Paired signed-rank comparison of two per-scan reports.
    Compare(CompareArgs),
    /// Overlay slice profiles in one image.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Write source, target and test domains plus manifest.csv.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GapArg {
    None,
    Mild,
    Strong,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Tiny,
    Full,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    source_n: usize,
    #[arg(long)]
    target_n: usize,
    /// Test scans (defaults to --target-n).
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "mild")]
    gap: GapArg,
    #[arg(long, value_enum, default_value = "tiny")]
    scale: ScaleArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML). Missing keys take the setting's defaults.
    #[arg(long, required_unless_present = "run_dir")]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Output root; the run goes to a new subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reduced-scale defaults (96×96, small networks, 10 epochs).
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Train folds in up to N concurrent worker processes.
    #[arg(long, default_value_t = 1)]
    parallel_folds: usize,
    /// Worker mode: train only these folds of an existing run directory.
    #[arg(long, requires = "run_dir")]
    only_fold: Vec<usize>,
    #[arg(long, hide = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run id under the output root, or a run directory.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (defaults to <run>/eval).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated class names (default fc,tc,pc,m).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Method label used in file names and tables (defaults to the setting).
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value_t = 1000)]
    bootstrap_iters: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Reference per-scan report (report_<method>.csv).
    a: PathBuf,
    /// Report compared against the reference.
    b: PathBuf,
    #[arg(long)]
    name_a: Option<String>,
    #[arg(long)]
    name_b: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Profile tables (profile_<class>_<method>.csv).
    #[arg(required = true)]
    profiles: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Legend labels, one per profile (default: file stems).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
}

fn out_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    }
}

fn io_err(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| io_err(p, e))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let gap = match a.gap {
        GapArg::None => Gap::None,
        GapArg::Mild => Gap::Mild,
        GapArg::Strong => Gap::Strong,
    };
    let scale = match a.scale {
        ScaleArg::Tiny => Scale::Tiny,
        ScaleArg::Full => Scale::Full,
    };
    let mut spec = BenchmarkSpec::with_gap(a.source_n, a.target_n, a.seed, gap, scale);
    spec.test_count = a.test_n;
    generate_benchmark(&a.out, &spec)?;
    println!("{}", a.out.join("manifest.csv").display());
    Ok(())
}

fn overrides(a: &TrainArgs) -> toml::Table {
    let mut t = toml::Table::new();
    if let Some(s) = &a.setting {
        t.insert("setting".into(), toml::Value::String(s.clone()));
    }
    if let Some(s) = a.seed {
        t.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if let Some(e) = a.epochs {
        t.insert("epochs".into(), toml::Value::Integer(e as i64));
    }
    if let Some(f) = a.folds {
        t.insert("fold_count".into(), toml::Value::Integer(f as i64));
    }
    t
}

fn spawn_worker(run_dir: &Path, manifest: &Path, fold: usize) -> Result<Child> {
    let exe = std::env::current_exe().map_err(|e| io_err("current executable", e))?;
    Command::new(exe)
        .arg("train")
        .arg("--manifest")
        .arg(manifest)
        .arg("--run-dir")
        .arg(run_dir)
        .arg("--only-fold")
        .arg(fold.to_string())
        .spawn()
        .map_err(|e| io_err("fold worker", e))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    if let Some(dir) = &a.run_dir {
        let (cfg, hash) = load_run_config(dir)?;
        let only = (!a.only_fold.is_empty()).then_some(a.only_fold.as_slice());
        run_experiment(&cfg, &manifest, Some(dir), only)?;
        if only.is_none() {
            let mut record = RunRecord {
                run_id: stem(dir),
                config_hash: hash,
                setting: cfg.setting,
                seed: cfg.seed,
                fold_count: cfg.fold_count,
                fold_digests: Default::default(),
            };
            finalize_run(dir, &mut record)?;
        }
        return Ok(());
    }
    let path = a.config.as_ref().expect("clap enforces --config");
    let cfg = ExperimentConfig::from_toml(&read_text(path)?, a.tiny, &overrides(&a))?;
    // checked before creating the run directory
    kneeseg::training::plan_folds(&cfg, &manifest)?;
    let (dir, mut record) = create_run_dir(&out_root(a.out.as_deref()), &cfg)?;
    if a.parallel_folds <= 1 {
        run_experiment(&cfg, &manifest, Some(&dir), None)?;
    } else {
        let mut pending: Vec<usize> = (0..cfg.fold_count).rev().collect();
        let mut running: Vec<(usize, Child)> = Vec::new();
        let mut failed = Vec::new();
        while !pending.is_empty() || !running.is_empty() {
            while running.len() < a.parallel_folds {
                let Some(f) = pending.pop() else { break };
                running.push((f, spawn_worker(&dir, &a.manifest, f)?));
            }
            let (f, mut child) = running.remove(0);
            let status = child.wait().map_err(|e| io_err("fold worker", e))?;
            if !status.success() {
                failed.push(f);
            }
        }
        if !failed.is_empty() {
            return Err(Error::Data(format!("fold workers failed: {failed:?}")));
        }
    }
    finalize_run(&dir, &mut record)?;
    println!("{}", dir.display());
    Ok(())
}

fn parse_classes(names: &[String]) -> Result<Vec<u8>> {
    if names.is_empty() {
        return Ok(vec![1, 2, 3, 4]);
    }
    names
        .iter()
        .map(|n| {
            let n = n.trim().to_ascii_lowercase();
            match CLASS_NAMES.iter().position(|c| *c == n) {
                Some(i) if i > 0 => Ok(i as u8),
                _ => Err(Error::Config(format!("unknown class {n:?} (expected fc, tc, pc or m)"))),
            }
        })
        .collect()
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let run_dir = if a.run.is_dir() { a.run.clone() } else { out_root(None).join(&a.run) };
    if !run_dir.is_dir() {
        return Err(Error::Data(format!("run {} not found", a.run.display())));
    }
    let classes = parse_classes(&a.classes)?;
    let manifest = load_manifest(&a.manifest)?;
    let (cfg, mut models) = load_run_models(&run_dir)?;
    let opts = ProfileOptions {
        bootstrap_iters: a.bootstrap_iters,
        ..ProfileOptions::default()
    };
    let method = a.method.unwrap_or_else(|| cfg.setting.to_string());
    let out = a.out.unwrap_or_else(|| run_dir.join("eval"));
    let (_, _, files) = evaluate_models(&mut models, &cfg, &manifest, &classes, &opts, &method, &out)?;
    println!("{}", files.table.display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let ra = read_report_csv(&a.a)?;
    let rb = read_report_csv(&a.b)?;
    let name = |n: Option<String>, p: &Path| n.unwrap_or_else(|| stem(p).trim_start_matches("report_").to_string());
    let cmp = Comparison::compute(&ra, &rb, &name(a.name_a, &a.a), &name(a.name_b, &a.b))?;
    if let Some(out) = &a.out {
        write_comparison(&cmp, out)?;
    }
    print!("{}", cmp.to_text());
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.profiles.len() {
        return Err(Error::Config("give one label per profile".into()));
    }
    let profiles = a.profiles.iter().map(|p| read_profile_csv(p)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = if a.labels.is_empty() { a.profiles.iter().map(|p| stem(p)).collect() } else { a.labels };
    let pairs: Vec<(&str, &_)> = labels.iter().map(String::as_str).zip(&profiles).collect();
    render_profiles_png(&pairs, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Cmd::Phantom {
            action: PhantomCmd::Generate(a),
        } => cmd_generate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
