//! Command-line driver: data generation, fitting, prediction, evaluation and
//! the benchmark protocols.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use bne::benchmark::{loo_method, run_benchmark, spatial_fit_config, Method};
use bne::config::RunConfig;
use bne::data::{
    load_base_predictions, load_dataset, save_base_predictions, save_columns, save_dataset, synth_1d,
    synth_spatial_with_bias, Dataset, NoiseKind, SpatialScenario,
};
use bne::evaluation::{evaluate, grid_quantile, theorem1_check, write_report, ReportRow};
use bne::inference::EnsembleData;
use bne::seeds::derive_seed;
use bne::snapshot::{fit_model, Snapshot};
use bne::Points;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bne", version, about = "Bayesian nonparametric ensembles with calibrated predictive distributions")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for replications and folds.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Method(s): ours, ours_kl_only, avg, cv_stack, lnr_stack, nlr_stack, gam.
    #[arg(long = "method", global = true, value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Use y = f(x) + e instead of y = f(x + e) in the 1-D generator.
    #[arg(long, global = true)]
    additive_noise: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a 1-D dataset.
    Synth1d {
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Draw the 2-D spatial scenario: sites plus a regular map grid.
    Synthspatial {
        #[arg(long)]
        n_sites: Option<usize>,
        #[arg(long)]
        n_models: Option<usize>,
        #[arg(long)]
        bias_scale: Option<f64>,
    },
    /// Train kernel ridge base models and tabulate them at new inputs.
    Fitbases {
        /// One shared training file, or one per length-scale.
        #[arg(long = "train", required = true)]
        train: Vec<PathBuf>,
        /// Files whose inputs receive base predictions.
        #[arg(long = "at", required = true)]
        at: Vec<PathBuf>,
        /// Comma-separated length-scales.
        #[arg(long, value_delimiter = ',')]
        length_scales: Vec<f64>,
    },
    /// Fit a model and write a snapshot.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict with a snapshot at the inputs of a base-prediction file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a snapshot on a dataset with targets and base predictions.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Leave-one-out comparison; defaults to the spatial scenario.
    Loo {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// The 1-D replication protocol.
    Benchmark,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: bne::Error| e.to_string())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(shared: &Shared) -> anyhow::Result<Self> {
        let mut cfg = match &shared.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = shared.seed {
            cfg.seed = s;
        }
        cfg.fit.seed = cfg.seed;
        if let Some(r) = shared.reps {
            cfg.replications = r;
        }
        if !shared.methods.is_empty() {
            cfg.method = shared.methods[0];
            cfg.methods = shared.methods.clone();
        }
        if shared.jobs.is_some() {
            cfg.jobs = shared.jobs;
        }
        cfg.additive_noise |= shared.additive_noise;
        cfg.validate()?;
        let out = shared.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out).map_err(bne::Error::from)?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn noise(&self) -> NoiseKind {
        if self.cfg.additive_noise { NoiseKind::Additive } else { NoiseKind::Input }
    }

    fn data_path(&self, explicit: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
        explicit.clone().or_else(|| self.cfg.data.clone()).ok_or_else(|| bne::Error::Input("no --data given".into()).into())
    }
}

fn ensemble_data(ds: &Dataset) -> anyhow::Result<EnsembleData> {
    let bases = ds.base_predictions.clone().ok_or_else(|| bne::Error::Input("dataset has no pred_<name> columns".into()))?;
    Ok(EnsembleData::new(ds.inputs.clone(), ds.targets.clone(), bases)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx::new(&cli.shared)?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Synth1d { n } => {
            let ds = synth_1d(n, cfg.seed, ctx.noise())?;
            save_dataset(&ds, ctx.path("synth1d.csv"))?;
        }
        Command::Synthspatial { n_sites, n_models, bias_scale } => {
            let sp = &cfg.spatial;
            let (n_sites, n_models, bias) =
                (n_sites.unwrap_or(sp.n_sites), n_models.unwrap_or(sp.n_models), bias_scale.unwrap_or(sp.bias_scale));
            let ds = synth_spatial_with_bias(n_sites, n_models, cfg.seed, bias)?;
            save_dataset(&ds, ctx.path("synthspatial.csv"))?;
            let grid = SpatialScenario::new(n_models, cfg.seed, bias)?.grid(sp.grid_side, derive_seed(cfg.seed, 0x6D))?;
            save_dataset(&grid, ctx.path("synthspatial_grid.csv"))?;
        }
        Command::Fitbases { train, at, length_scales } => {
            let sets = train
                .iter()
                .map(|p| load_dataset(p).map(|d| (d.inputs, d.targets)))
                .collect::<bne::Result<Vec<_>>>()?;
            let ls = if length_scales.is_empty() { cfg.baselines.length_scales.clone() } else { length_scales };
            let models = bne::baselines::fit_base_models(&sets, &ls, cfg.baselines.ridge)?;
            for p in &at {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
                let target = ctx.path(&format!("{stem}_bases.csv"));
                match load_dataset(p) {
                    Ok(mut ds) => {
                        ds.base_predictions = Some(models.predict(&ds.inputs)?);
                        save_dataset(&ds, target)?;
                    }
                    Err(_) => {
                        let x = load_inputs(p)?;
                        save_base_predictions(&x, &models.predict(&x)?, target)?;
                    }
                }
            }
        }
        Command::Fit { data } => {
            let ds = load_dataset(ctx.data_path(&data)?)?;
            let ed = ensemble_data(&ds)?;
            let fit_cfg = fit_config_for(cfg, &ds);
            let model = with_pool(cfg, || fit_model(cfg.method, &ed, &fit_cfg, &cfg.baselines))?;
            Snapshot::new(model).save(ctx.path("model.json"))?;
        }
        Command::Predict { model, data } => {
            let snap = Snapshot::load(&model)?;
            let (x, bases) = load_base_predictions(&data)?;
            let pred = with_pool(cfg, || snap.model.predict(&x, &bases))?;
            save_columns(&x, &prediction_columns(&pred), ctx.path("predictions.csv"))?;
        }
        Command::Evaluate { model, data } => {
            let snap = Snapshot::load(&model)?;
            let ds = load_dataset(&data)?;
            let ed = ensemble_data(&ds)?;
            let pred = with_pool(cfg, || snap.model.predict(&ed.x, &ed.bases))?;
            let truth = ds.truth.clone().unwrap_or_else(|| ds.targets.clone());
            let method = snap.model.method();
            let mut report = evaluate(method.name(), &pred.mean, &truth, pred.predictive.as_ref(), &ds.targets)?;
            if let (Some(_), Some(f0)) = (&pred.predictive, &pred.uncalibrated) {
                let uncal = evaluate("uncalibrated", &f0.mean, &truth, Some(f0), &ds.targets)?;
                report.theorem_bound = Some(theorem1_check(&report, &uncal)?);
            }
            write_report(ctx.path("report.csv"), &report.rows(0))?;
            println!("{} rmse={:.6}", method, report.rmse);
        }
        Command::Loo { data } => {
            let ds = match data.or_else(|| cfg.data.clone()) {
                Some(p) => load_dataset(p)?,
                None => synth_spatial_with_bias(cfg.spatial.n_sites, cfg.spatial.n_models, cfg.seed, cfg.spatial.bias_scale)?,
            };
            let fit_cfg = fit_config_for(cfg, &ds);
            let mut rows = Vec::new();
            let mut columns = vec![("y".to_string(), ds.targets.clone())];
            for &m in &cfg.methods {
                let res = with_pool(cfg, || loo_method(&ds, m, &fit_cfg, &cfg.baselines, cfg.seed, true))?;
                println!("{m} loo_rmse={:.6} failures={}", res.pooled_rmse, res.failures);
                rows.push(ReportRow::new("loo_rmse", None, res.pooled_rmse, m.name(), 0));
                rows.push(ReportRow::new("loo_failures", None, res.failures as f64, m.name(), 0));
                columns.push((format!("pred_{m}"), res.predictions.iter().map(|p| p.unwrap_or(f64::NAN)).collect()));
            }
            write_report(ctx.path("loo.csv"), &rows)?;
            save_columns(&ds.inputs, &columns, ctx.path("loo_predictions.csv"))?;
        }
        Command::Benchmark => {
            let bcfg = cfg.benchmark();
            let res = with_pool(cfg, || run_benchmark(&bcfg))?;
            write_report(ctx.path("benchmark.csv"), &res.rows())?;
            for s in res.summary() {
                let mad = s.mean_coverage_mad.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                let bound = s.theorem_holds.map(|(a, b)| format!(" theorem_holds={a}/{b}")).unwrap_or_default();
                println!("{:<13} mean_rmse={:.4} coverage_mad={mad}{bound}", s.method, s.mean_rmse);
            }
        }
    }
    Ok(())
}

/// The spatial scenario uses an OU residual kernel.
fn fit_config_for(cfg: &RunConfig, ds: &Dataset) -> bne::inference::FitConfig {
    if ds.inputs.dim() == 2 { spatial_fit_config(&cfg.fit) } else { cfg.fit.clone() }
}

fn load_inputs(p: &Path) -> anyhow::Result<Points> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!(bne::Error::Parse { line: 1, message: "no rows".into() }))?.split(',').map(str::trim).collect();
    let cols: Vec<usize> = ["x1", "x2"].iter().filter_map(|c| header.iter().position(|h| h == c)).collect();
    if cols.is_empty() {
        return Err(bne::Error::Parse { line: 1, message: "missing column x1".into() }.into());
    }
    let mut data = Vec::new();
    for (i, l) in lines.enumerate() {
        let cells: Vec<&str> = l.split(',').collect();
        for &c in &cols {
            let v = cells.get(c).and_then(|s| s.trim().parse::<f64>().ok());
            data.push(v.ok_or_else(|| bne::Error::Parse { line: i + 2, message: "bad input value".into() })?);
        }
    }
    Ok(Points::new(cols.len(), data)?)
}

fn prediction_columns(pred: &bne::snapshot::ModelPrediction) -> Vec<(String, Vec<f64>)> {
    let mut cols = vec![("mean".to_string(), pred.mean.clone())];
    if let Some(pd) = &pred.predictive {
        let g = &pd.y_grid;
        for (name, q) in [("q05", 0.05), ("q25", 0.25), ("q50", 0.5), ("q75", 0.75), ("q95", 0.95)] {
            cols.push((name.into(), (0..pd.n()).map(|i| grid_quantile(|j| pd.cdf[(i, j)], g, q)).collect()));
        }
        let vc = &pd.variance_components;
        cols.push(("ensemble_var".into(), vc.iter().map(|v| v.ensemble).collect()));
        cols.push(("residual_var".into(), vc.iter().map(|v| v.residual).collect()));
        cols.push(("noise_var".into(), vc.iter().map(|v| v.noise).collect()));
        cols.push(("total_var".into(), vc.iter().map(|v| v.total()).collect()));
    }
    if let Some(f0) = &pred.uncalibrated {
        cols.push(("mean_uncalibrated".into(), f0.mean.clone()));
    }
    cols
}

/// Runs `f` on a pool of `--jobs` threads, or on the global pool.
fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> bne::Result<T> + Send) -> anyhow::Result<T> {
    let out = match cfg.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new().num_threads(j).build()?.install(f),
        None => f(),
    };
    Ok(out?)
}

fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<bne::Error>().map(bne::Error::category))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("internal")
}

fn exit_code(cat: &str) -> u8 {
    match cat {
        "input" => 3,
        "config" => 4,
        "parse" => 5,
        "numerical" => 6,
        "inference" => 7,
        "unsupported" => 8,
        "io" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = category(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{cat}]: {msg}");
            ExitCode::from(exit_code(cat))
        }
    }
}
