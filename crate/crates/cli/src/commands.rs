use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use amortflow::amortizers::{ComparisonAmortizer, LikelihoodAmortizer, PosteriorAmortizer};
use amortflow::csvio::{fmt_e8, read_table, write_table};
use amortflow::diagnostics::{
    misspecification_test, posterior_contraction, recovery, sbc_ranks, write_contraction_csv, write_misspec_csv,
    write_recovery_csv, write_sbc_ranks_csv, write_sbc_test_csv,
};
use amortflow::model::{
    builtin_model, read_batch_csv, sample_batch, sample_batch_with_n, write_batch_csv, BuiltinModel, GenerativeModel,
    ModelSet, SimulationBatch,
};
use amortflow::training::{load_checkpoint, train, TrainHistory};
use amortflow::{Error, Result, Rng, Tensor};
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, AmortizerKind, WorkflowConfig};

// Rng streams per subcommand, all derived from the one seed.
const SIMULATE_STREAM: u64 = 100;
const SAMPLE_STREAM: u64 = 101;
const DIAGNOSE_STREAM: u64 = 102;
const COMPARE_STREAM: u64 = 103;

pub const CHECKPOINT_FILE: &str = "checkpoint.bfc";

#[derive(Debug, Parser)]
#[command(name = "amortflow", about = "Amortized simulation-based inference workflow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON workflow config; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a batch of data sets to `simulations.csv`.
    Simulate,
    /// Train the configured amortizer; writes `checkpoint.bfc` and `history.csv`.
    Train,
    /// Posterior draws (or emulated data for likelihood amortizers).
    Sample {
        /// Batch CSV from `simulate`, or a plain table of observations.
        #[arg(long)]
        data: PathBuf,
        /// Draws per data set.
        #[arg(long)]
        n_draws: usize,
        /// Checkpoint to load; defaults to `<out>/checkpoint.bfc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recovery, SBC, contraction and misspecification diagnostics.
    Diagnose {
        /// Observed sets for the misspecification test (batch CSV).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Posterior model probabilities to `pmp.csv`.
    Compare {
        /// Batch CSV or plain observation table; simulated if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name) and runs the subcommand.
///
/// Returns 0 on success, 1 on runtime failure and 2 on usage or config errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn load_config(common: &Common) -> Result<WorkflowConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            parse_config(&text)?
        }
        None => WorkflowConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let model = builtin_model(&cfg.model)?;
    match &cli.command {
        Command::Simulate => simulate(&cfg, &model),
        Command::Train => train_command(&cfg, &model),
        Command::Sample {
            data,
            n_draws,
            checkpoint,
        } => sample(&cfg, &model, data, *n_draws, checkpoint.as_deref()),
        Command::Diagnose { data, checkpoint } => diagnose(&cfg, &model, data.as_deref(), checkpoint.as_deref()),
        Command::Compare { data, checkpoint } => compare(&cfg, &model, data.as_deref(), checkpoint.as_deref()),
    }
}

fn out_dir(cfg: &WorkflowConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    Ok(&cfg.out)
}

fn checkpoint_path(cfg: &WorkflowConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf)
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| (*c).to_owned()).collect()
}

fn simulate(cfg: &WorkflowConfig, model: &BuiltinModel) -> Result<()> {
    let mut rng = Rng::stream(cfg.seed, SIMULATE_STREAM);
    let dir = out_dir(cfg)?;
    let s = &cfg.simulate;
    let path = dir.join("simulations.csv");
    let batch = match model {
        BuiltinModel::Single(m) => {
            let batch = match s.n_obs {
                Some(n) => sample_batch_with_n(m.as_ref(), s.n_sims, n, &mut rng)?,
                None => sample_batch(m.as_ref(), s.n_sims, &mut rng)?,
            };
            write_batch_csv(&path, &batch)?;
            batch
        }
        BuiltinModel::Set(set) => {
            let per = (s.n_sims / set.len()).max(1);
            let n = s.n_obs.unwrap_or_else(|| set.sample_set_size(&mut rng));
            let (batch, labels) = set.sample_balanced_with_n(per, n, &mut rng)?;
            write_batch_csv(&path, &batch)?;
            write_labels(&dir.join("labels.csv"), set, &labels)?;
            batch
        }
    };
    println!(
        "wrote {} ({} sets x {} observations)",
        path.display(),
        batch.len(),
        batch.n_obs
    );
    Ok(())
}

fn write_labels(path: &Path, set: &ModelSet, labels: &[usize]) -> Result<()> {
    let names = set.model_names();
    let rows: Vec<Vec<String>> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| vec![i.to_string(), l.to_string(), names[l].clone()])
        .collect();
    write_table(path, &header(&["dataset", "model_index", "model"]), &rows)
}

fn write_history(path: &Path, h: &TrainHistory) -> Result<()> {
    let mut rows = vec![vec!["0".to_owned(), fmt_e8(f64::NAN), fmt_e8(h.initial_val_loss)]];
    for (e, (t, v)) in h.epoch_train_loss.iter().zip(&h.epoch_val_loss).enumerate() {
        rows.push(vec![(e + 1).to_string(), fmt_e8(*t), fmt_e8(*v)]);
    }
    write_table(path, &header(&["epoch", "train_loss", "val_loss"]), &rows)
}

fn train_command(cfg: &WorkflowConfig, model: &BuiltinModel) -> Result<()> {
    let dir = out_dir(cfg)?;
    let settings = cfg.network.settings();
    let mut tc = cfg.train_config();
    let ckpt = dir.join(CHECKPOINT_FILE);
    tc.checkpoint = Some(ckpt.clone());
    let history = match cfg.amortizer {
        AmortizerKind::Posterior => {
            let m = model.single()?;
            let mut am = PosteriorAmortizer::<f32>::new(m, &settings, cfg.seed)?;
            train(&mut am, m, &tc)?
        }
        AmortizerKind::Likelihood => {
            let m = model.single()?;
            let mut am = LikelihoodAmortizer::<f32>::new(m, &settings, cfg.seed)?;
            train(&mut am, m, &tc)?
        }
        AmortizerKind::Comparison => {
            let set = model.set()?;
            let mut am = ComparisonAmortizer::<f32>::new(set, &settings, cfg.seed)?;
            train(&mut am, set, &tc)?
        }
    };
    write_history(&dir.join("history.csv"), &history)?;
    println!(
        "trained {:?} amortizer on {}: validation loss {:.4} -> {:.4} (best epoch {}), checkpoint {}",
        cfg.amortizer,
        cfg.model,
        history.initial_val_loss,
        history.best_val_loss(),
        history.best_epoch + 1,
        ckpt.display()
    );
    Ok(())
}

/// Observed data sets, each `[N, obs_dim]` with a context row, plus the
/// parameters if the file carried them.
struct Observed {
    sets: Vec<(Tensor<f64>, Vec<f64>)>,
    batch: Option<SimulationBatch>,
}

/// Reads a batch CSV (header with `data_` columns) or a plain table with one
/// observation per row (one data set).
fn read_observed(path: &Path, obs_dim: usize, context_dim: usize) -> Result<Observed> {
    let (head, rows) = read_table(path)?;
    if head.iter().any(|h| h.starts_with("data_")) {
        let batch = read_batch_csv(path)?;
        if batch.obs_dim() != obs_dim || batch.context_dim() != context_dim {
            return Err(Error::Shape {
                op: "observed batch",
                lhs: vec![batch.obs_dim(), batch.context_dim()],
                rhs: vec![obs_dim, context_dim],
            });
        }
        let sets = (0..batch.len())
            .map(|i| {
                let data = Tensor::new(vec![batch.n_obs, obs_dim], batch.data_row(i).to_vec())?;
                Ok((data, batch.context.row(i).to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(Observed {
            sets,
            batch: Some(batch),
        });
    }
    if head.len() != obs_dim || context_dim != 0 {
        return Err(Error::Csv(format!(
            "{}: expected {obs_dim} observation columns, found {}",
            path.display(),
            head.len()
        )));
    }
    let mut values = Vec::with_capacity(rows.len() * obs_dim);
    for row in &rows {
        for field in row {
            values.push(amortflow::csvio::parse_f64(field)?);
        }
    }
    Ok(Observed {
        sets: vec![(Tensor::new(vec![rows.len(), obs_dim], values)?, Vec::new())],
        batch: None,
    })
}

fn sample(cfg: &WorkflowConfig, model: &BuiltinModel, data: &Path, n_draws: usize, ckpt: Option<&Path>) -> Result<()> {
    let settings = cfg.network.settings();
    let mut rng = Rng::stream(cfg.seed, SAMPLE_STREAM);
    match cfg.amortizer {
        AmortizerKind::Posterior => {
            let m = model.single()?;
            let observed = read_observed(data, m.obs_dim(), m.context_dim())?;
            let named = load_checkpoint(&checkpoint_path(cfg, ckpt))?;
            let am = PosteriorAmortizer::<f32>::from_checkpoint(m, &settings, &named)?;
            let dir = out_dir(cfg)?;
            let mut head = header(&["dataset", "draw"]);
            head.extend(m.param_names());
            let mut rows = Vec::new();
            for (i, (x, ctx)) in observed.sets.iter().enumerate() {
                let draws = am.sample(x, ctx, n_draws, &mut rng)?;
                for k in 0..draws.rows() {
                    let mut row = vec![i.to_string(), k.to_string()];
                    row.extend(draws.row(k).iter().map(|v| fmt_e8(*v)));
                    rows.push(row);
                }
            }
            let path = dir.join("posterior_draws.csv");
            write_table(&path, &head, &rows)?;
            println!(
                "wrote {} ({} data sets x {n_draws} draws)",
                path.display(),
                observed.sets.len()
            );
            Ok(())
        }
        AmortizerKind::Likelihood => {
            let m = model.single()?;
            let observed = read_observed(data, m.obs_dim(), m.context_dim())?;
            let batch = observed
                .batch
                .ok_or_else(|| Error::Config("likelihood sampling needs a batch CSV with parameter columns".into()))?;
            let named = load_checkpoint(&checkpoint_path(cfg, ckpt))?;
            let am = LikelihoodAmortizer::<f32>::from_checkpoint(m, &settings, &named)?;
            let dir = out_dir(cfg)?;
            let mut head = header(&["dataset", "draw"]);
            head.extend((0..m.obs_dim()).map(|j| format!("x_{j}")));
            let mut rows = Vec::new();
            for i in 0..batch.len() {
                let x = am.emulate(batch.params.row(i), batch.context.row(i), n_draws, &mut rng)?;
                for k in 0..x.rows() {
                    let mut row = vec![i.to_string(), k.to_string()];
                    row.extend(x.row(k).iter().map(|v| fmt_e8(*v)));
                    rows.push(row);
                }
            }
            let path = dir.join("emulated_data.csv");
            write_table(&path, &head, &rows)?;
            println!(
                "wrote {} ({} parameter rows x {n_draws} observations)",
                path.display(),
                batch.len()
            );
            Ok(())
        }
        AmortizerKind::Comparison => Err(Error::Config(
            "`sample` needs a posterior or likelihood amortizer; use `compare` for model comparison".into(),
        )),
    }
}

fn diagnose(cfg: &WorkflowConfig, model: &BuiltinModel, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    if cfg.amortizer != AmortizerKind::Posterior {
        return Err(Error::Config("`diagnose` needs a posterior amortizer".into()));
    }
    let m: &dyn GenerativeModel = model.single()?;
    let d = &cfg.diagnose;
    let observed = match data {
        Some(p) => Some(read_batch_csv(p)?),
        None => None,
    };
    let named = load_checkpoint(&checkpoint_path(cfg, ckpt))?;
    let am = PosteriorAmortizer::<f32>::from_checkpoint(m, &cfg.network.settings(), &named)?;
    let dir = out_dir(cfg)?;
    let mut rng = Rng::stream(cfg.seed, DIAGNOSE_STREAM);

    let rec = recovery(&am, m, d.recovery_sims, d.recovery_draws, d.n_obs, &mut rng)?;
    write_recovery_csv(&dir.join("recovery.csv"), &rec)?;
    let sbc = sbc_ranks(&am, m, d.sbc_sims, d.sbc_draws, d.n_obs, &mut rng)?;
    write_sbc_ranks_csv(&dir.join("sbc_ranks.csv"), &sbc)?;
    write_sbc_test_csv(&dir.join("sbc_test.csv"), &sbc)?;
    let contraction = posterior_contraction(&am, m, d.contraction_sims, d.contraction_draws, d.n_obs, &mut rng)?;
    write_contraction_csv(&dir.join("contraction.csv"), &m.param_names(), &contraction)?;

    let observed = match observed {
        Some(b) => b,
        None => {
            let n = d.n_obs.unwrap_or_else(|| m.sample_set_size(&mut rng));
            sample_batch_with_n(m, d.misspec_sets, n, &mut rng)?
        }
    };
    let mis = misspecification_test(
        &am,
        m,
        &observed.data,
        &observed.context,
        d.null_replicas,
        d.reference_sets,
        &mut rng,
    )?;
    write_misspec_csv(&dir.join("misspec.csv"), &mis)?;

    for (j, name) in m.param_names().iter().enumerate() {
        let corr = rec.correlation[j].map_or_else(|| "undefined".to_owned(), |c| format!("{c:.3}"));
        println!(
            "{name}: recovery r = {corr}, rmse = {:.3}; SBC chi2 = {:.2}, p = {:.3}; contraction = {:.3}",
            rec.rmse[j], sbc.chi2[j], sbc.p_value[j], contraction[j]
        );
    }
    println!(
        "misspecification: MMD^2 = {:.5}, p = {:.3}",
        mis.observed_mmd2, mis.p_value
    );
    println!("wrote diagnostics to {}", dir.display());
    Ok(())
}

fn compare(cfg: &WorkflowConfig, model: &BuiltinModel, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    if cfg.amortizer != AmortizerKind::Comparison {
        return Err(Error::Config("`compare` needs a comparison amortizer".into()));
    }
    let set = model.set()?;
    let (observed, labels) = match data {
        Some(p) => (read_observed(p, set.obs_dim(), set.context_dim())?.sets, None),
        None => {
            let mut rng = Rng::stream(cfg.seed, COMPARE_STREAM);
            let n = cfg.compare.n_obs.unwrap_or_else(|| set.sample_set_size(&mut rng));
            let (batch, labels) = set.sample_balanced_with_n(cfg.compare.sets_per_model, n, &mut rng)?;
            let sets = (0..batch.len())
                .map(|i| {
                    Ok((
                        Tensor::new(vec![n, set.obs_dim()], batch.data_row(i).to_vec())?,
                        batch.context.row(i).to_vec(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            (sets, Some(labels))
        }
    };
    let named = load_checkpoint(&checkpoint_path(cfg, ckpt))?;
    let am = ComparisonAmortizer::<f32>::from_checkpoint(set, &cfg.network.settings(), &named)?;
    let dir = out_dir(cfg)?;
    let mut head = header(&["dataset"]);
    if labels.is_some() {
        head.push("true_model".into());
    }
    head.extend(set.model_names().iter().map(|n| format!("p_{n}")));
    let mut rows = Vec::with_capacity(observed.len());
    let mut correct = 0;
    for (i, (x, ctx)) in observed.iter().enumerate() {
        let pmp = am.predict_pmp(x, ctx)?;
        let mut row = vec![i.to_string()];
        if let Some(l) = &labels {
            row.push(l[i].to_string());
            let best = (0..pmp.len()).fold(0, |b, k| if pmp[k] > pmp[b] { k } else { b });
            correct += usize::from(best == l[i]);
        }
        row.extend(pmp.iter().map(|p| fmt_e8(*p)));
        rows.push(row);
    }
    let path = dir.join("pmp.csv");
    write_table(&path, &head, &rows)?;
    if labels.is_some() {
        println!(
            "accuracy on {} simulated sets: {:.3}",
            rows.len(),
            correct as f64 / rows.len() as f64
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
