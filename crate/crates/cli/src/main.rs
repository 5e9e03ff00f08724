use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use comgen_core::config::ExperimentConfig;
use comgen_core::dataio::{read_fids, write_fids};
use comgen_core::diagnostics::{drift_score, export_drift_json, export_group_csv, group_latents};
use comgen_core::factorspace::{DatasetSplit, SplitManifest};
use comgen_core::image::ImageSet;
use comgen_core::metrics::{
    encode_table, evaluate_dci, factor_table, lasso_predict_table, r_squared, subsample, write_hinton_csv,
    AssignmentMap, CoefficientMatrix, DciEvaluation, RSquared,
};
use comgen_core::nnmodels::checkpoint::{peek_manifest, ModelKind, FORMAT as CHECKPOINT_FORMAT};
use comgen_core::nnmodels::{CompositionModel, LatentEncoder, Profile, SupervisedModel};
use comgen_core::synthgen::{generate_full, DatasetDef};
use comgen_core::training::{
    fit_composition, fit_supervised, reconstruction_error, supervised_error, write_history_csv, ObjectiveFamily,
};

/// Configuration problems that should exit with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "comgen", version, about = "Combinatorial generalisation experiments on synthetic sprite datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the configured architecture profile.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Reduced,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and write the archive and split manifest.
    Gen,
    /// Train the configured model.
    Train,
    /// Compute losses, disentanglement and R² for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export latent group statistics, drift and the Hinton matrix.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "factor_b")]
        factor_a: Option<String>,
        #[arg(long, requires = "factor_a")]
        factor_b: Option<String>,
    },
    /// gen, train, eval and diagnose in sequence.
    All,
}

#[derive(Serialize)]
struct Versions {
    comgen: &'static str,
    checkpoint_format: &'static str,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: Versions,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct LossTable {
    train_loss: f64,
    test_loss: f64,
    disentanglement: f64,
}

#[derive(Serialize)]
struct RSquaredReport {
    train: RSquared,
    test: RSquared,
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
}

struct Data {
    def: DatasetDef,
    images: ImageSet,
    split: DatasetSplit,
}

enum Model {
    Composition(CompositionModel),
    Supervised(SupervisedModel),
}

impl Model {
    fn encoder(&self) -> &dyn LatentEncoder {
        match self {
            Model::Composition(m) => m,
            Model::Supervised(m) => m,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    fn manifest(&self, command: &str) -> Result<()> {
        let dir = self.dir("manifests")?;
        let m = RunManifest {
            command,
            config_hash: self.cfg.hash()?,
            seed: self.cfg.seed,
            versions: Versions {
                comgen: env!("CARGO_PKG_VERSION"),
                checkpoint_format: CHECKPOINT_FORMAT,
            },
            config: &self.cfg,
        };
        write_json(&dir.join(format!("{command}.json")), &m)?;
        write_json(&self.path("config.json"), &self.cfg)
    }

    fn gen(&self) -> Result<Data> {
        let def = self.cfg.dataset.definition()?;
        let images = generate_full(&def, &self.cfg.render_spec())?;
        let split = self.cfg.split(&def)?;
        let dir = self.dir("data")?;
        write_fids(&images, &def.space, dir.join("dataset.fids"))?;
        write_json(&dir.join("split.json"), &split.manifest(def.name(), self.cfg.condition.name()))?;
        log::info!(
            "{}: {} images, {} train / {} test",
            def.name(),
            images.len(),
            split.train.len(),
            split.test.len()
        );
        self.manifest("gen")?;
        Ok(Data { def, images, split })
    }

    /// Reads the stored dataset, or renders it when absent.
    fn data(&self) -> Result<Data> {
        let fids = self.path("data/dataset.fids");
        let split_path = self.path("data/split.json");
        if !fids.exists() || !split_path.exists() {
            return self.gen();
        }
        let def = self.cfg.dataset.definition()?;
        let (images, space) = read_fids(&fids)?;
        if space != def.space {
            bail!(UsageError(format!(
                "{} was generated for a different factor space; rerun gen",
                fids.display()
            )));
        }
        let render = self.cfg.render_spec();
        if images.height != render.size || images.channels != render.channels {
            bail!(UsageError(format!(
                "{} has {}x{}x{} images but the config renders {}x{}x{}",
                fids.display(),
                images.channels,
                images.height,
                images.width,
                render.channels,
                render.size,
                render.size
            )));
        }
        let manifest: SplitManifest = serde_json::from_str(&fs::read_to_string(&split_path)?)
            .with_context(|| format!("parsing {}", split_path.display()))?;
        let split = manifest.to_split(&def.space)?;
        if split.test != self.cfg.split(&def)?.test {
            bail!(UsageError(format!(
                "{} does not match the configured condition; rerun gen",
                split_path.display()
            )));
        }
        Ok(Data { def, images, split })
    }

    fn train(&self, data: &Data) -> Result<PathBuf> {
        let model_cfg = self.cfg.model_config()?;
        let ckpt_root = self.dir("checkpoints")?;
        let final_dir = ckpt_root.join("final");
        let seed = self.cfg.seed;
        let report = match self.cfg.objective.family {
            ObjectiveFamily::Supervised => {
                let mut model = SupervisedModel::new(model_cfg, seed)?;
                log::info!("supervised model with {} parameters", model.n_params());
                let r = fit_supervised(&mut model, &data.images, &data.def.space, &data.split, &self.cfg.train, Some(&ckpt_root))?;
                model.save(&final_dir, seed, r.history.len())?;
                r
            }
            _ => {
                let mut model = CompositionModel::new(model_cfg, seed)?;
                log::info!("composition model with {} parameters", model.n_params());
                let r = fit_composition(
                    &mut model,
                    &data.images,
                    &data.def.space,
                    &data.split,
                    &self.cfg.objective,
                    &self.cfg.train,
                    Some(&ckpt_root),
                )?;
                model.save(&final_dir, seed, r.history.len())?;
                r
            }
        };
        write_history_csv(&report.history, self.path("history.csv"))?;
        log::info!(
            "trained {} epochs{}",
            report.history.len(),
            if report.stopped_early { " (early stop)" } else { "" }
        );
        self.manifest("train")?;
        Ok(final_dir)
    }

    fn load(&self, checkpoint: Option<&Path>) -> Result<Model> {
        let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| self.path("checkpoints/final"));
        let manifest = peek_manifest(&dir).with_context(|| format!("reading checkpoint {}", dir.display()))?;
        let model = match manifest.kind {
            ModelKind::Composition => Model::Composition(CompositionModel::load(&dir)?.0),
            ModelKind::Supervised => Model::Supervised(SupervisedModel::load(&dir)?.0),
        };
        let expected = self.cfg.model_config()?;
        let found = match &model {
            Model::Composition(m) => &m.config,
            Model::Supervised(m) => &m.config,
        };
        if *found != expected {
            bail!(UsageError(format!(
                "checkpoint {} was trained with a different model configuration",
                dir.display()
            )));
        }
        Ok(model)
    }

    fn dci(&self, data: &Data, model: &Model) -> Result<(CoefficientMatrix, DciEvaluation)> {
        Ok(evaluate_dci(
            model.encoder(),
            &data.images,
            &data.def.space,
            &data.split.train,
            &self.cfg.metrics.lasso(),
            self.cfg.metrics.sample_size,
            self.cfg.seed,
        )?)
    }

    fn eval(&self, data: &Data, checkpoint: Option<&Path>) -> Result<()> {
        let model = self.load(checkpoint)?;
        let space = &data.def.space;
        let (train_loss, test_loss) = match &model {
            Model::Composition(m) => {
                let kind = self.cfg.objective.reconstruction;
                (
                    reconstruction_error(m, &data.images, &data.split.train, kind)?,
                    reconstruction_error(m, &data.images, &data.split.test, kind)?,
                )
            }
            Model::Supervised(m) => (
                supervised_error(m, &data.images, space, &data.split.train)?,
                supervised_error(m, &data.images, space, &data.split.test)?,
            ),
        };
        let (_, dci) = self.dci(data, &model)?;
        let encoder = model.encoder();
        let r2_on = |indices: &[usize], fit: &[usize]| -> Result<RSquared> {
            let z = encode_table(encoder, &data.images, indices)?;
            let target = factor_table(space, indices);
            let pred = match &model {
                Model::Supervised(_) => z,
                Model::Composition(_) => {
                    let zf = encode_table(encoder, &data.images, fit)?;
                    let vf = factor_table(space, fit);
                    lasso_predict_table(zf.view(), vf.view(), z.view(), &self.cfg.metrics.lasso())?
                }
            };
            Ok(r_squared(pred.view(), target.view())?)
        };
        let fit = subsample(&data.split.train, self.cfg.metrics.sample_size, self.cfg.seed);
        let r2 = RSquaredReport {
            train: r2_on(&data.split.train, &fit)?,
            test: r2_on(&data.split.test, &fit)?,
        };
        let dir = self.dir("eval")?;
        let table = LossTable {
            train_loss,
            test_loss,
            disentanglement: dci.disentanglement.aggregate,
        };
        write_json(&dir.join("disentanglement.json"), &dci)?;
        write_json(&dir.join("r2.json"), &r2)?;
        write_json(&dir.join("losses.json"), &table)?;
        fs::write(
            dir.join("losses.csv"),
            format!(
                "train_loss,test_loss,disentanglement\n{:?},{:?},{:?}\n",
                table.train_loss, table.test_loss, table.disentanglement
            ),
        )?;
        println!(
            "train loss {:.4}  test loss {:.4}  disentanglement {:.4}",
            table.train_loss, table.test_loss, table.disentanglement
        );
        self.manifest("eval")
    }

    fn diagnose_pair(&self, pair: Option<(String, String)>) -> Result<(String, String)> {
        let (a, b) = match pair {
            Some(p) => p,
            None => self.cfg.diagnose_pair()?,
        };
        let def = self.cfg.dataset.definition()?;
        for name in [&a, &b] {
            if def.space.factor_index(name).is_err() {
                bail!(UsageError(format!("unknown factor {name:?} for diagnostics")));
            }
        }
        if a == b {
            bail!(UsageError("diagnostics need two distinct factors".into()));
        }
        Ok((a, b))
    }

    fn diagnose(&self, data: &Data, checkpoint: Option<&Path>, (a, b): (String, String)) -> Result<()> {
        let model = self.load(checkpoint)?;
        let space = &data.def.space;
        let (c, dci) = self.dci(data, &model)?;
        let assignment = match &model {
            Model::Supervised(_) => AssignmentMap::identity(space.n_factors()),
            Model::Composition(_) => dci
                .assignment
                .clone()
                .context("the coefficient matrix admits no factor-to-latent assignment")?,
        };
        let groups = group_latents(model.encoder(), &data.images, space, &data.split, &a, &b, &assignment)?;
        let dir = self.dir("diagnose")?;
        export_group_csv(&groups, dir.join("groups.csv"))?;
        let names: Vec<String> = space.factors().iter().map(|f| f.name.clone()).collect();
        write_hinton_csv(&c, &names, dir.join("hinton.csv"))?;
        let drift = drift_score(&groups)?;
        export_drift_json(&drift, dir.join("drift.json"))?;
        println!(
            "drift {:.4} over {} test groups (train baseline {:.4})",
            drift.aggregate,
            drift.test_groups.len(),
            drift.train_baseline
        );
        self.manifest("diagnose")
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("COMGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("COMGEN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let path = cli.config.ok_or_else(|| UsageError("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(p) = cli.profile {
        cfg.profile = match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Reduced => Profile::Reduced,
        };
    }
    cfg.validate()?;
    let run = Run {
        out: cfg.output_dir.clone(),
        cfg,
    };
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    match cli.command {
        Command::Gen => {
            run.gen()?;
        }
        Command::Train => {
            let data = run.data()?;
            run.train(&data)?;
        }
        Command::Eval { checkpoint } => {
            let data = run.data()?;
            run.eval(&data, checkpoint.as_deref())?;
        }
        Command::Diagnose {
            checkpoint,
            factor_a,
            factor_b,
        } => {
            let pair = run.diagnose_pair(factor_a.zip(factor_b))?;
            let data = run.data()?;
            run.diagnose(&data, checkpoint.as_deref(), pair)?;
        }
        Command::All => {
            let data = run.gen()?;
            let ckpt = run.train(&data)?;
            run.eval(&data, Some(&ckpt))?;
            run.diagnose(&data, Some(&ckpt), run.diagnose_pair(None)?)?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<comgen_core::Error>(), Some(comgen_core::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
