//! The `survfuse` command line: `ingest`, `train`, `predict`, `evaluate`,
//! `simulate`, `sweep` and `plot` over one JSON run configuration.
//!
//! Every command writes `resolved_config.json` into its output directory;
//! rerunning with `--config` on that file repeats the command.

pub mod compare;
pub mod config;
pub mod pipeline;
pub mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::ensemble::{read_risks, write_risks};
use crate::error::{Error, ErrorClass, Result};
use crate::survival::{concordance, kaplan_meier, SurvivalRecord};
use crate::synthetic::{
    calibrate_c_max, generate_tabular, generate_volumes, write_cohort, BlobSpec, SyntheticSpec,
};
use crate::tabular::{parse_ehr_csv, EncodingSpec, MissingPolicy};
use config::{ModelKind, RunConfig};
use pipeline::{
    cross_validate, encode_table, image_config, kind_needs_images, load_dataset, load_model,
    read_manifest, read_table, save_model, train_model, write_trace, Metrics, ENCODING_FILE,
    LOSS_FILE, METRICS_FILE, RISKS_FILE,
};

#[derive(Debug, Parser)]
#[command(
    name = "survfuse",
    version,
    about = "Survival prognosis from EHR tables and CT/PET volumes"
)]
pub struct Cli {
    /// Run configuration (JSON); unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub ehr: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<MissingPolicy>,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub bbox: Option<PathBuf>,
}

fn parse_policy(s: &str) -> std::result::Result<MissingPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and encode an EHR table; writes the fitted encoding and records.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fit a model; writes the model, loss trace, training risks and metrics.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        /// Overrides the epoch count of every iterative model.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Risk per patient from a trained model directory.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// C-index of a risk CSV against observed outcomes.
    Evaluate {
        #[arg(long)]
        risks: Option<PathBuf>,
        /// Outcome CSV with `PatientID,Time,Event`; defaults to `data.ehr`.
        #[arg(long)]
        outcomes: Option<PathBuf>,
    },
    /// Generate a synthetic cohort in the ingestion formats.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
        /// Also write blob volumes with the default blob settings.
        #[arg(long)]
        volumes: bool,
    },
    /// k-fold grid search over `c_reg` and `lr`; writes a leaderboard.
    Sweep {
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long)]
        folds: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Kaplan-Meier, predicted and partial-effect curves as CSV and SVG.
    Plot {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        covariate: Option<String>,
        #[command(flatten)]
        data: DataArgs,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let class = e.class();
            if class == ErrorClass::Config {
                eprintln!("{}", Cli::command().render_usage());
            }
            class.exit_code()
        }
    }
}

fn apply_data(cfg: &mut RunConfig, d: DataArgs) {
    let data = &mut cfg.data;
    data.ehr = d.ehr.or(data.ehr.take());
    data.schema = d.schema.or(data.schema.take());
    data.policy = d.policy.or(data.policy);
    data.volumes = d.volumes.or(data.volumes.take());
    data.bbox = d.bbox.or(data.bbox.take());
}

/// Folds global flags and subcommand arguments into the configuration.
pub fn resolve_config(cli: &mut Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out.take() {
        cfg.out = o;
    }
    match &mut cli.command {
        Command::Ingest { data } => apply_data(&mut cfg, std::mem::take(data)),
        Command::Train {
            model,
            epochs,
            data,
        } => {
            if let Some(m) = model {
                cfg.model = *m;
            }
            if let Some(e) = epochs {
                cfg.mtlr.epochs = *e;
                cfg.neural_mtlr.train.epochs = *e;
                cfg.fusion.train.epochs = *e;
            }
            apply_data(&mut cfg, std::mem::take(data));
        }
        Command::Predict { model, data } => {
            if let Some(m) = model.take() {
                cfg.predict.model = Some(m);
            }
            apply_data(&mut cfg, std::mem::take(data));
        }
        Command::Evaluate { risks, outcomes } => {
            cfg.evaluate.risks = risks.take().or(cfg.evaluate.risks.take());
            cfg.evaluate.outcomes = outcomes.take().or(cfg.evaluate.outcomes.take());
        }
        Command::Simulate { n, volumes } => {
            if let Some(n) = n {
                cfg.simulate.n = *n;
            }
            if *volumes && cfg.simulate.volumes.is_none() {
                cfg.simulate.volumes = Some(BlobSpec::default());
            }
        }
        Command::Sweep { model, folds, data } => {
            if let Some(m) = model {
                cfg.model = *m;
            }
            if let Some(k) = folds {
                cfg.sweep.folds = *k;
            }
            apply_data(&mut cfg, std::mem::take(data));
        }
        Command::Plot {
            model,
            covariate,
            data,
        } => {
            cfg.plot.model = model.take().or(cfg.plot.model.take());
            cfg.plot.covariate = covariate.take().or(cfg.plot.covariate.take());
            apply_data(&mut cfg, std::mem::take(data));
        }
    }
    Ok(cfg.resolve())
}

pub fn execute(mut cli: Cli) -> Result<()> {
    let cfg = resolve_config(&mut cli)?;
    cfg.write_resolved(&cfg.out)?;
    match cli.command {
        Command::Ingest { .. } => cmd_ingest(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Predict { .. } => cmd_predict(&cfg),
        Command::Evaluate { .. } => cmd_evaluate(&cfg),
        Command::Simulate { .. } => cmd_simulate(&cfg),
        Command::Sweep { .. } => cmd_sweep(&cfg),
        Command::Plot { .. } => cmd_plot(&cfg),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("`{what}` is not set")))
}

#[derive(Serialize)]
struct RejectedRow {
    row: usize,
    patient_id: String,
    reason: String,
}

#[derive(Serialize)]
struct IngestReport {
    rows: usize,
    rejected: Vec<RejectedRow>,
    features: Vec<String>,
    dropped_columns: Vec<String>,
    missing_cells: std::collections::BTreeMap<String, usize>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let (table, schema) = read_table(&cfg.data, None)?;
    let (records, spec) = encode_table(&table, &schema, cfg.data.policy())?;
    let out = &cfg.out;
    write_json(&out.join(ENCODING_FILE), &spec)?;
    let names = pipeline::feature_names(&spec);
    let mut w = csv::Writer::from_path(out.join("records.csv"))?;
    let mut header = vec!["PatientID".to_string(), "Time".into(), "Event".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in &records {
        let mut row = vec![
            r.patient_id.clone(),
            r.time.to_string(),
            u8::from(r.event).to_string(),
        ];
        row.extend(r.covariates.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    let kept: Vec<&str> = spec.columns.iter().map(|c| c.name.as_str()).collect();
    let report = IngestReport {
        rows: records.len(),
        rejected: table
            .rejected
            .iter()
            .map(|d| RejectedRow {
                row: d.row,
                patient_id: d.patient_id.clone(),
                reason: d.reason.clone(),
            })
            .collect(),
        features: names,
        dropped_columns: schema
            .columns
            .iter()
            .filter(|c| !kept.contains(&c.name.as_str()))
            .map(|c| c.name.clone())
            .collect(),
        missing_cells: schema
            .columns
            .iter()
            .map(|c| (c.name.clone(), table.missing_count(&c.name)))
            .collect(),
    };
    write_json(&out.join("ingest_report.json"), &report)?;
    println!(
        "ingested {} patients ({} rejected), {} features",
        report.rows,
        report.rejected.len(),
        report.features.len()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let kind = cfg.model;
    let fusion = if kind_needs_images(kind, cfg)? {
        Some(image_config(kind, cfg)?)
    } else {
        None
    };
    let (data, spec) = load_dataset(
        &cfg.data,
        None,
        fusion.as_ref().map(|f| (f, cfg.preprocess.as_ref())),
    )?;
    let out = &cfg.out;
    let outcome = train_model(kind, cfg, &data, out)?;
    save_model(out, &outcome.model, cfg.preprocess.as_ref())?;
    write_json(&out.join(ENCODING_FILE), &spec)?;
    for member in read_manifest(out)?.members {
        write_json(&out.join(member).join(ENCODING_FILE), &spec)?;
    }
    write_trace(&out.join(LOSS_FILE), &outcome.trace)?;
    let risks = outcome.model.predict_risks(&data)?;
    write_risks(out.join(RISKS_FILE), &risks)?;
    let c = concordance(&risks, &data.records)?;
    let mut metrics = Metrics::new(kind, &data.records, &c);
    metrics.extra = outcome.extra;
    write_json(&out.join(METRICS_FILE), &metrics)?;
    println!(
        "{}: training C-index {:.4} over {} pairs",
        kind.name(),
        c.c_index,
        c.comparable_pairs
    );
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let dir = required(&cfg.predict.model, "predict.model")?;
    let model = load_model(dir)?;
    let manifest = read_manifest(dir)?;
    let fitted = EncodingSpec::from_json_file(dir.join(ENCODING_FILE))?;
    let fusion = model.fusion_config().cloned();
    let images = if model.needs_images() {
        fusion.as_ref().map(|f| (f, manifest.preprocess.as_ref()))
    } else {
        None
    };
    let (data, _) = load_dataset(&cfg.data, Some(&fitted), images)?;
    let risks = model.predict_risks(&data)?;
    write_risks(cfg.out.join(RISKS_FILE), &risks)?;
    println!(
        "wrote {} risks to {}",
        risks.len(),
        cfg.out.join(RISKS_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    n: usize,
    c_index: f64,
    comparable_pairs: u64,
    concordant: u64,
    tied_risk: u64,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let risks = read_risks(required(&cfg.evaluate.risks, "evaluate.risks")?)?;
    let outcomes = cfg
        .evaluate
        .outcomes
        .as_ref()
        .or(cfg.data.ehr.as_ref())
        .ok_or_else(|| Error::Config("`evaluate.outcomes` is not set".into()))?;
    let table = parse_ehr_csv(outcomes, &EncodingSpec::new(Vec::new()))?;
    let records = table
        .rows
        .iter()
        .map(|r| SurvivalRecord::new(r.patient_id.clone(), Vec::new(), r.time, r.event))
        .collect::<Result<Vec<_>>>()?;
    let known: std::collections::HashSet<&str> =
        records.iter().map(|r| r.patient_id.as_str()).collect();
    let extra: Vec<String> = risks
        .iter()
        .filter(|r| !known.contains(r.patient_id.as_str()))
        .map(|r| r.patient_id.clone())
        .collect();
    if !extra.is_empty() {
        return Err(Error::PatientMismatch(extra));
    }
    let c = concordance(&risks, &records)?;
    write_json(
        &cfg.out.join("evaluation.json"),
        &Evaluation {
            n: records.len(),
            c_index: c.c_index,
            comparable_pairs: c.comparable_pairs,
            concordant: c.concordant,
            tied_risk: c.tied_risk,
        },
    )?;
    println!(
        "C-index {:.6} over {} comparable pairs",
        c.c_index, c.comparable_pairs
    );
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.simulate;
    let mut spec = SyntheticSpec {
        n: s.n,
        beta_true: s.beta_true.clone(),
        lambda: s.lambda,
        c_max: None,
        seed: cfg.seed,
        volumes: s.volumes.clone(),
    };
    spec.c_max = match (s.c_max, s.censored_fraction) {
        (Some(c), _) => Some(c),
        (None, Some(f)) if f > 0.0 => Some(calibrate_c_max(&spec, f)?),
        _ => None,
    };
    let cohort = generate_tabular(&spec)?;
    let volumes = match spec.volumes {
        Some(_) => Some(generate_volumes(&cohort, &spec)?),
        None => None,
    };
    write_cohort(&cfg.out, &cohort, volumes.as_deref())?;
    write_json(&cfg.out.join("simulation.json"), &spec)?;
    println!(
        "simulated {} patients, {:.1}% censored{}",
        spec.n,
        100.0 * cohort.censored_fraction(),
        if volumes.is_some() {
            ", with volumes"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub c_reg: f64,
    pub lr: f64,
    pub mean_c_index: f64,
    pub sd_c_index: f64,
    pub folds: usize,
}

/// Mean validation C-index per grid point, best first.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<LeaderboardRow>> {
    if cfg.sweep.c_reg.is_empty() || cfg.sweep.lr.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let (table, schema) = read_table(&cfg.data, None)?;
    let mut rows = Vec::new();
    for &c_reg in &cfg.sweep.c_reg {
        for &lr in &cfg.sweep.lr {
            let mut point = cfg.clone();
            point.cox.ridge = c_reg;
            point.mtlr.c_reg = c_reg;
            point.mtlr.lr = lr;
            point.neural_mtlr.train.c_reg = c_reg;
            point.neural_mtlr.train.lr = lr;
            point.fusion.train.c_reg = c_reg;
            point.fusion.train.lr = lr;
            let scores = cross_validate(cfg.model, &point, &table, &schema, cfg.sweep.folds)?;
            let k = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / k;
            let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k).sqrt();
            rows.push(LeaderboardRow {
                rank: 0,
                c_reg,
                lr,
                mean_c_index: mean,
                sd_c_index: sd,
                folds: scores.len(),
            });
        }
    }
    rows.sort_by(|a, b| b.mean_c_index.total_cmp(&a.mean_c_index));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let rows = sweep(cfg)?;
    let mut w = csv::Writer::from_path(cfg.out.join("leaderboard.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in &rows {
        println!(
            "{:>3}  c_reg={:<10} lr={:<10} C={:.4} ± {:.4}",
            r.rank, r.c_reg, r.lr, r.mean_c_index, r.sd_c_index
        );
    }
    Ok(())
}

pub fn cmd_plot(cfg: &RunConfig) -> Result<()> {
    let dir = required(&cfg.plot.model, "plot.model")?;
    let model = load_model(dir)?;
    let manifest = read_manifest(dir)?;
    let fitted = EncodingSpec::from_json_file(dir.join(ENCODING_FILE))?;
    let fusion = model.fusion_config().cloned();
    let images = if model.needs_images() {
        fusion.as_ref().map(|f| (f, manifest.preprocess.as_ref()))
    } else {
        None
    };
    let (data, _) = load_dataset(&cfg.data, Some(&fitted), images)?;
    let out = &cfg.out;

    plot::write_plot(
        out,
        "km",
        "Kaplan-Meier",
        &[("kaplan-meier".into(), kaplan_meier(&data.records)?)],
    )?;

    if model.kind() != ModelKind::Ensemble {
        let idx: Vec<usize> = if cfg.plot.patients.is_empty() {
            (0..data.records.len().min(5)).collect()
        } else {
            cfg.plot
                .patients
                .iter()
                .map(|p| {
                    data.records
                        .iter()
                        .position(|r| &r.patient_id == p)
                        .ok_or_else(|| Error::Input(format!("unknown patient `{p}`")))
                })
                .collect::<Result<_>>()?
        };
        let subset = data.subset(&idx);
        let curves = model.survival_curves(&subset)?;
        let named: Vec<_> = subset
            .records
            .iter()
            .map(|r| r.patient_id.clone())
            .zip(curves)
            .collect();
        plot::write_plot(out, "curves", "Predicted survival", &named)?;
    }

    if let Some(cov) = &cfg.plot.covariate {
        let pipeline::TrainedModel::Cox(cox) = &model else {
            return Err(Error::Config("partial effects need a cox model".into()));
        };
        let curves = cox.partial_effect_curves(&data.records, cov, &cfg.plot.values)?;
        let named: Vec<_> = cfg
            .plot
            .values
            .iter()
            .map(|v| format!("{cov}={v}"))
            .zip(curves)
            .collect();
        plot::write_plot(
            out,
            "partial_effects",
            &format!("Partial effect of {cov}"),
            &named,
        )?;
    }
    println!("wrote plots to {}", out.display());
    Ok(())
}
