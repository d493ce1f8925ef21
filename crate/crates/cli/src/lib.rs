//! Command implementations behind the `relcap` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use relcap::autodiff::CustomOp;
use relcap::data::{
    generate_synthetic, load_captions, load_embeddings, load_scenes, write_captions, write_scenes, CaptionRecord,
    GeneratorConfig, Scene, Vocabulary,
};
use relcap::diagnostics::{gradcheck_suite, ComponentCheck};
use relcap::metrics::RelationalDictionary;
use relcap::model::{
    evaluate, madgap_sweep, partition, predict, required_words, Checkpoint, Dataset, EvalReport, Model, ModelConfig,
    SweepConfig, SweepRow, TrainConfig, Trainer,
};
use relcap::slgc::{SpatialWordBank, HORIZONTAL_WORDS, VERTICAL_WORDS};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] relcap::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Every tunable of a run. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Percentage of scenes, by id hash, held out for evaluation.
    pub val_percent: u32,
    /// Whitespace-separated word vectors; pseudo-embeddings when absent.
    pub embeddings: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GeneratorConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            val_percent: 20,
            embeddings: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: GeneratorConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                Self::from_toml(&text).map_err(|source| CliError::Config {
                    path: p.to_owned(),
                    source,
                })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.val_percent > 100 {
            return Err(relcap::Error::Config("val_percent must lie in 0..=100".into()).into());
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.train.epochs == 0 || self.sweep.k == 0 || self.sweep.max_layers == 0 {
            return Err(relcap::Error::Config("epochs, sweep.k and sweep.max_layers must be positive".into()).into());
        }
        Ok(())
    }

    /// Folds command-line overrides in; the train seed follows the run seed.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(l) = o.layers {
            self.model.layers = l;
            self.sweep.max_layers = l;
        }
        if o.no_quintuplets {
            self.model.quintuplets = false;
            self.sweep.quintuplets = false;
        }
        for a in &o.ablate {
            match a {
                Ablation::Edges => self.model.edges_off = true,
                Ablation::Slgc => self.model.slgc_off = true,
                Ablation::Otag => self.model.otag_off = true,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// No edge features and no triplet graphs.
    Edges,
    /// No edge features.
    Slgc,
    /// No triplet graphs.
    Otag,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Graph convolution layers (the sweep's deepest stack).
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub no_quintuplets: bool,
    /// Disable a component; repeatable.
    #[arg(long, global = true, value_enum)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Parser)]
#[command(name = "relcap", version, about = "Relation-aware dense captioning of 3D scenes")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes and template captions.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Train on the training split of a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting afresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score greedy captions on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// IoU threshold; repeatable.
        #[arg(long = "k", default_values_t = [0.25, 0.5])]
        k: Vec<f64>,
        /// Relational word dictionary (JSON with "simple" and "complex").
        #[arg(long)]
        dictionary: Option<PathBuf>,
        /// Report path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Caption the objects of one scene as prediction JSONL.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene JSONL file.
        #[arg(long)]
        scene: PathBuf,
        /// Which scene of the file; required when it holds several.
        #[arg(long)]
        scene_id: Option<String>,
        /// Caption only this object.
        #[arg(long)]
        object: Option<usize>,
    },
    /// Finite-difference check of every operation and composite.
    Gradcheck,
    /// MADGap of untrained encoders by depth, plus the triplet-graph row.
    MadgapSweep {
        /// Data directory; fresh synthetic scenes when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Writes through a sibling temporary file so readers never see a partial
/// file.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> relcap::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let scenes_path = out.join(SCENES_FILE);
    let captions_path = out.join(CAPTIONS_FILE);
    check_writable(&scenes_path, force)?;
    check_writable(&captions_path, force)?;
    let (scenes, captions) = generate_synthetic::<f64>(&cfg.data, cfg.seed)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_atomic(&scenes_path, |w| write_scenes(w, &scenes))?;
    write_atomic(&captions_path, |w| write_captions(w, &captions))?;
    Ok(())
}

pub fn load_data(dir: &Path) -> Result<(Vec<Scene<f64>>, Vec<CaptionRecord>)> {
    let scenes_path = dir.join(SCENES_FILE);
    let captions_path = dir.join(CAPTIONS_FILE);
    if !scenes_path.is_file() || !captions_path.is_file() {
        return Err(CliError::Usage(format!(
            "{} must hold {SCENES_FILE} and {CAPTIONS_FILE} (see gen-data)",
            dir.display()
        )));
    }
    let scenes = load_scenes(&scenes_path, None)?;
    let captions = load_captions(&captions_path)?;
    Ok((scenes, captions))
}

/// Trains until the configured number of epochs is done, writing one JSON
/// line per epoch to `log` and the checkpoint after each epoch. A resumed run
/// keeps the checkpoint's optimiser settings and takes only the epoch budget
/// from `cfg`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>, force: bool, log: &mut impl Write) -> Result<()> {
    if resume != Some(out) {
        check_writable(out, force)?;
    }
    let (scenes, captions) = load_data(data)?;
    let (train_scenes, _) = partition(scenes, cfg.val_percent);
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(&Checkpoint::load(p)?)?;
            t.set_epochs(cfg.train.epochs);
            t
        }
        None => {
            // every caption of the data set, so held-out words stay decodable
            let vocab = Vocabulary::build(captions.iter().map(|c| c.tokens.as_slice()));
            let table = load_embeddings(cfg.embeddings.as_deref(), &required_words(&vocab))?;
            let model = Model::new(cfg.model.clone(), vocab, &table, cfg.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    let data = Dataset::new(train_scenes, &captions, trainer.model.vocab(), trainer.model.config().k)?;
    if data.is_empty() {
        return Err(CliError::Usage("the training split holds no captions".into()));
    }
    while trainer.epochs_done() < trainer.config().epochs {
        let entry = trainer.run_epoch(&data)?;
        write_atomic(out, |w| {
            serde_json::to_writer(&mut *w, &trainer.checkpoint())?;
            Ok(())
        })?;
        serde_json::to_writer(&mut *log, &entry).map_err(relcap::Error::from)?;
        writeln!(log).map_err(io_err(out))?;
        log.flush().map_err(io_err(out))?;
    }
    Ok(())
}

pub fn load_dictionary(path: Option<&Path>) -> Result<RelationalDictionary> {
    Ok(match path {
        Some(p) => RelationalDictionary::load(p)?,
        None => RelationalDictionary::default(),
    })
}

/// Scores the checkpoint on the held-out split of `data`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, ks: &[f64], dict: &RelationalDictionary) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(CliError::Usage("at least one --k is required".into()));
    }
    let model: Model<f64> = Checkpoint::load(checkpoint)?.model()?;
    let (scenes, captions) = load_data(data)?;
    let (_, val) = partition(scenes, cfg.val_percent);
    if val.is_empty() {
        return Err(CliError::Usage("the held-out split is empty; raise val_percent".into()));
    }
    let ids: std::collections::HashSet<&str> = val.iter().map(|s| s.scene_id.as_str()).collect();
    let captions: Vec<CaptionRecord> = captions.into_iter().filter(|c| ids.contains(c.scene_id.as_str())).collect();
    Ok(evaluate(&model, &val, &captions, ks, dict)?)
}

pub fn caption(
    checkpoint: &Path,
    scene_file: &Path,
    scene_id: Option<&str>,
    object: Option<usize>,
    out: &mut impl Write,
) -> Result<()> {
    let model: Model<f64> = Checkpoint::load(checkpoint)?.model()?;
    let scenes: Vec<Scene<f64>> = load_scenes(scene_file, None)?;
    let scene = match (scene_id, scenes.len()) {
        (Some(id), _) => scenes
            .iter()
            .find(|s| s.scene_id == id)
            .ok_or_else(|| CliError::Usage(format!("{} holds no scene {id}", scene_file.display())))?,
        (None, 1) => &scenes[0],
        (None, n) => {
            return Err(CliError::Usage(format!(
                "{} holds {n} scenes; choose one with --scene-id",
                scene_file.display()
            )))
        }
    };
    let ids = match object {
        Some(o) => vec![o],
        None => scene.object_ids(),
    };
    for p in predict(&model, scene, &ids)? {
        serde_json::to_writer(&mut *out, &p).map_err(relcap::Error::from)?;
        writeln!(out).map_err(io_err(scene_file))?;
    }
    Ok(())
}

/// Runs the gradient-check suite with optional extra custom operations and
/// prints one line per component. Fails if any component does.
pub fn gradcheck(seed: u64, extra: &[Rc<dyn CustomOp<f64>>], out: &mut impl Write) -> Result<Vec<ComponentCheck>> {
    let checks = gradcheck_suite(seed, extra)?;
    for c in &checks {
        writeln!(
            out,
            "{:<6} {:<28} max_rel_error {:.3e}  coords {}{}",
            if c.passed { "PASS" } else { "FAIL" },
            c.component,
            c.max_rel_error,
            c.coords,
            if c.skipped > 0 {
                format!(" (skipped {} at kinks)", c.skipped)
            } else {
                String::new()
            }
        )
        .map_err(io_err(Path::new("<stdout>")))?;
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.component.clone()).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::GradCheck(failed))
    }
}

pub fn sweep(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SweepRow>> {
    let scenes = match data {
        Some(d) => load_data(d)?.0,
        None => generate_synthetic::<f64>(&cfg.data, cfg.seed)?.0,
    };
    let words: Vec<&str> = HORIZONTAL_WORDS.iter().chain(&VERTICAL_WORDS).copied().collect();
    let bank = SpatialWordBank::from_table(&load_embeddings(cfg.embeddings.as_deref(), &words)?);
    Ok(madgap_sweep(&scenes, &bank, &cfg.sweep, cfg.seed)?)
}

fn write_json(path: Option<&Path>, force: bool, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(relcap::Error::from)?;
    match path {
        Some(p) => {
            check_writable(p, force)?;
            write_atomic(p, |w| Ok(w.write_all(text.as_bytes())?))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.overrides.config.as_deref())?;
    cfg.apply(&cli.overrides);
    cfg.validate()?;
    let stdout = std::io::stdout();
    match cli.command {
        Command::GenData { out, force } => gen_data(&cfg, &out, force),
        Command::Train {
            data,
            out,
            resume,
            force,
        } => train(&cfg, &data, &out, resume.as_deref(), force, &mut stdout.lock()),
        Command::Eval {
            checkpoint,
            data,
            k,
            dictionary,
            out,
            force,
        } => {
            let dict = load_dictionary(dictionary.as_deref())?;
            let report = eval(&cfg, &checkpoint, &data, &k, &dict)?;
            write_json(out.as_deref(), force, &report)
        }
        Command::Caption {
            checkpoint,
            scene,
            scene_id,
            object,
        } => caption(&checkpoint, &scene, scene_id.as_deref(), object, &mut stdout.lock()),
        Command::Gradcheck => gradcheck(cfg.seed, &[], &mut stdout.lock()).map(|_| ()),
        Command::MadgapSweep { data } => {
            let rows = sweep(&cfg, data.as_deref())?;
            let mut out = stdout.lock();
            for r in &rows {
                serde_json::to_writer(&mut out, r).map_err(relcap::Error::from)?;
                writeln!(out).map_err(io_err(Path::new("<stdout>")))?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("relcap").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn partial_files_keep_defaults_and_reject_typos() {
        let cfg = RunConfig::from_toml("seed = 4\n[model]\nhidden = 32\n").unwrap();
        assert_eq!((cfg.seed, cfg.model.hidden), (4, 32));
        assert_eq!(cfg.model.k, 10);
        assert_eq!(cfg.train.batch_size, 12);
        assert_eq!(cfg.train.lr, 1e-4);
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
        let bad = RunConfig::from_toml("val_percent = 101\n").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let cli = parse(&["--seed", "9", "--layers", "3", "--no-quintuplets", "--ablate", "otag", "--ablate", "slgc", "gradcheck"]);
        let mut cfg = RunConfig::default();
        cfg.apply(&cli.overrides);
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
        assert_eq!((cfg.model.layers, cfg.sweep.max_layers), (3, 3));
        assert!(!cfg.model.quintuplets && !cfg.sweep.quintuplets);
        assert!(cfg.model.otag_off && cfg.model.slgc_off && !cfg.model.edges_off);
        assert!(cfg.validate().is_ok());

        let mut plain = RunConfig::default();
        plain.apply(&parse(&["gradcheck"]).overrides);
        assert_eq!(plain, RunConfig::default());
    }

    #[test]
    fn eval_defaults_to_two_thresholds() {
        match parse(&["eval", "--checkpoint", "c.json", "--data", "d"]).command {
            Command::Eval { k, .. } => assert_eq!(k, [0.25, 0.5]),
            _ => unreachable!(),
        }
        assert!(Cli::try_parse_from(["relcap", "train", "--data", "d"]).is_err());
    }
}
