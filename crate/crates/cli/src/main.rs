mod dataset;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specsep::audio::{CorpusSpec, Fold};
use specsep::forge::{build_subdataset, write_dataset, write_manifest, Partition, SubdatasetId};
use specsep::gradsuite::{model_check, op_suite, MODEL_TOLERANCE};
use specsep::stt::{Ablation, SttConfig, SttModel};
use specsep::train::{
    evaluate, evaluate_baseline, load_checkpoint, separate, train, Profile, TrainConfig, TrainSinks,
};

use dataset::{CorpusSource, Dataset, DatasetDescriptor};

#[derive(Parser)]
#[command(name = "specsep", version, about = "Mixture synthesis and spectro-temporal source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Clone, Copy)]
struct Common {
    /// Seed for every random draw the command makes.
    #[arg(long)]
    seed: Option<u64>,
    /// Force bitwise-repeatable execution (`--deterministic=false` to lift it).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Studio,
}

impl Preset {
    fn profile(self) -> Profile {
        match self {
            Self::Desk => Profile::desk(),
            Self::Studio => Profile::studio(),
        }
    }

    fn corpus(self) -> CorpusSpec {
        match self {
            Self::Desk => CorpusSpec::desk(),
            Self::Studio => CorpusSpec::studio(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build subdataset manifests from a corpus directory or a synthetic corpus.
    Synth(SynthArgs),
    /// Write a training config to stdout for editing.
    Config(ConfigArgs),
    /// Train a model on one subdataset.
    Train(TrainArgs),
    /// Compare a checkpoint with the mixture-projection baseline.
    Eval(EvalArgs),
    /// Split a WAV file into source files.
    Separate(SeparateArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Train the architecture variants on a shared dataset and tabulate them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory laid out as `<class_id>/<tr|vl|te>/*.wav`.
    #[arg(long, conflicts_with = "corpus_spec")]
    corpus_dir: Option<PathBuf>,
    /// TOML corpus spec for a synthetic corpus (defaults to the preset's).
    #[arg(long)]
    corpus_spec: Option<PathBuf>,
    /// Seed of the synthetic corpus.
    #[arg(long, default_value_t = 0)]
    corpus_seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Partitions to build; all three by default.
    #[arg(long, value_delimiter = ',')]
    partition: Vec<Partition>,
    /// Source counts to build; 2,3,5 by default.
    #[arg(long, value_delimiter = ',')]
    sources: Vec<usize>,
    /// Records per training fold; validation and test folds get a fifth of it.
    #[arg(long)]
    count: Option<usize>,
    /// Also write every record's mixture and source WAVs.
    #[arg(long)]
    materialize: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value = "hybrid")]
    partition: Partition,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value = "full")]
    ablation: Ablation,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// TOML training config (see `specsep config`).
    #[arg(long)]
    config: PathBuf,
    /// Dataset root written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and `runlog.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    partition: Partition,
    #[arg(long, default_value = "te")]
    fold: Fold,
}

#[derive(Args)]
struct SeparateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mixture WAV at the model's sample rate; longer inputs are tiled.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Coordinates sampled per parameter tensor in the model check; 0 probes all.
    #[arg(long, default_value_t = 16)]
    per_tensor: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "hybrid")]
    partition: Partition,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Directory for one run folder per variant plus `ablation.json`.
    #[arg(long)]
    out: PathBuf,
    /// Base config; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => synth(a).map(|()| ExitCode::SUCCESS),
        Command::Config(a) => config(a).map(|()| ExitCode::SUCCESS),
        Command::Train(a) => train_cmd(a).map(|()| ExitCode::SUCCESS),
        Command::Eval(a) => eval_cmd(a).map(|()| ExitCode::SUCCESS),
        Command::Separate(a) => separate_cmd(a).map(|()| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a).map(|()| ExitCode::SUCCESS),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let common = a.common;
    let master_seed = common.seed.unwrap_or(0);
    let profile = a.preset.profile();
    let corpus = match &a.corpus_dir {
        Some(path) => CorpusSource::Dir { path: path.canonicalize()? },
        None => {
            let spec = match &a.corpus_spec {
                Some(p) => read_toml(p)?,
                None => a.preset.corpus(),
            };
            CorpusSource::Synthetic { spec, seed: a.corpus_seed }
        }
    };
    let descriptor = DatasetDescriptor { corpus, profile, master_seed, materialized: a.materialize };
    let corpus = descriptor.corpus()?;
    let partitions = if a.partition.is_empty() { Partition::ALL.to_vec() } else { a.partition };
    let sources = if a.sources.is_empty() { vec![2, 3, 5] } else { a.sources };
    let mix = profile.mix_params();
    descriptor.write(&a.out)?;
    for &partition in &partitions {
        for &s in &sources {
            for fold in [Fold::Tr, Fold::Vl, Fold::Te] {
                let id = SubdatasetId::new(partition, s, fold);
                let count = match (a.count, fold) {
                    (Some(n), Fold::Tr) => n,
                    (Some(n), _) => (n / 5).max(1),
                    (None, _) => profile.count(id),
                };
                let manifest = build_subdataset(&corpus, id, count, master_seed, &mix)
                    .with_context(|| format!("building {id}"))?;
                let path = if a.materialize {
                    write_dataset(&a.out, &manifest, &corpus)?
                } else {
                    let dir = manifest.dir(&a.out);
                    fs::create_dir_all(&dir)?;
                    let path = dir.join("manifest.jsonl");
                    write_manifest(&manifest, fs::File::create(&path)?)?;
                    path
                };
                let clamped: usize = manifest.records.iter().map(|r| r.clamp_count).sum();
                println!("{id}: {count} records, {clamped} clamped samples -> {}", path.display());
            }
        }
    }
    Ok(())
}

fn config(a: ConfigArgs) -> Result<()> {
    let common = a.common;
    let mut cfg = match a.preset {
        Preset::Desk => TrainConfig::desk(a.partition, a.sources),
        Preset::Studio => TrainConfig::studio(a.partition, a.sources),
    };
    cfg.stt = cfg.stt.with_ablation(a.ablation);
    apply_common(&mut cfg, common);
    cfg.validate()?;
    print!("{}", toml::to_string_pretty(&cfg)?);
    Ok(())
}

fn apply_common(cfg: &mut TrainConfig, common: Common) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = common.deterministic {
        cfg.deterministic = d;
    }
}

fn run_training(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<specsep::train::TrainOutcome> {
    if cfg.profile != data.descriptor.profile {
        bail!("config profile does not match the dataset profile");
    }
    let id = cfg.subdataset;
    let tr = data.manifest(id.partition, id.sources, Fold::Tr)?;
    let vl = data.manifest(id.partition, id.sources, Fold::Vl)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), toml::to_string_pretty(cfg)?)?;
    let mut log = fs::File::create(out.join("runlog.jsonl"))?;
    let sinks = TrainSinks { log: Some(&mut log), checkpoint_dir: Some(out) };
    Ok(train(cfg, &data.source(&tr), &data.source(&vl), sinks)?)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_toml(&a.config)?;
    apply_common(&mut cfg, a.common);
    if let Some(n) = a.max_steps {
        cfg.max_steps = n;
    }
    let data = Dataset::open(&a.data)?;
    let outcome = run_training(&cfg, &data, &a.out)?;
    let last = outcome.log.train_losses().last().map_or(f64::NAN, |(_, l)| l);
    println!(
        "trained {} steps: last loss {last:.6}, best validation loss {:.6}; checkpoints in {}",
        cfg.max_steps,
        outcome.best_val_loss,
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let card = specsep::train::LoadedModel::from_checkpoint(&ck)?.card;
    let data = Dataset::open(&a.data)?;
    let manifest = data.manifest(a.partition, card.stt.sources, a.fold)?;
    let report = evaluate(&ck, &data.source(&manifest))?;
    let ratio = report.model_loss / report.baseline_loss;
    println!("{}", manifest.subdataset());
    println!("mixtures        {}", report.mixtures);
    println!("model loss      {:.6}", report.model_loss);
    println!("baseline loss   {:.6}", report.baseline_loss);
    println!("ratio           {ratio:.4}");
    Ok(())
}

fn separate_cmd(a: SeparateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    for path in separate(&ck, &a.input, &a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let seed = a.common.seed.unwrap_or(0);
    let mut ok = true;
    for op in op_suite(seed)? {
        let pass = op.passed();
        ok &= pass;
        println!(
            "{:<20} {:>6} coords  max rel err {:.3e}  {}",
            op.name,
            op.report.coords_checked,
            op.report.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let limit = (a.per_tensor > 0).then_some(a.per_tensor);
    let report = model_check(&SttConfig::toy(), seed, limit)?;
    let pass = report.max_rel_err <= MODEL_TOLERANCE;
    ok &= pass;
    println!(
        "{:<20} {:>6} coords  max rel err {:.3e}  {} (worst {})",
        "model",
        report.coords_checked,
        report.max_rel_err,
        if pass { "ok" } else { "FAIL" },
        report.worst
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(serde::Serialize)]
struct AblationRow {
    variant: Ablation,
    params: usize,
    val_loss: f64,
    baseline_loss: f64,
}

fn ablate(a: AblateArgs) -> Result<()> {
    let common = a.common;
    let mut base = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::desk(a.partition, a.sources),
    };
    base.subdataset = SubdatasetId::new(a.partition, a.sources, Fold::Tr);
    base.stt = base.profile.stt(a.sources).with_ablation(Ablation::Full);
    base.max_steps = a.steps;
    base.eval_every = base.eval_every.min(a.steps.max(1));
    apply_common(&mut base, common);
    let data = Dataset::open(&a.data)?;
    let vl = data.manifest(a.partition, a.sources, Fold::Vl)?;
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.stt = cfg.stt.with_ablation(variant);
        let params = SttModel::<f32>::new(cfg.stt.clone(), cfg.seed)?.census().total;
        let outcome = run_training(&cfg, &data, &a.out.join(variant.as_str()))?;
        let report = evaluate(&outcome.best, &data.source(&vl))?;
        eprintln!("{variant}: validation loss {:.6}", report.model_loss);
        rows.push(AblationRow { variant, params, val_loss: report.model_loss, baseline_loss: report.baseline_loss });
    }
    let baseline = evaluate_baseline(&data.source(&vl), &base.profile.stft)?;
    println!("{:<10} {:>10} {:>12} {:>8}", "variant", "params", "val loss", "ratio");
    for r in &rows {
        println!("{:<10} {:>10} {:>12.6} {:>8.4}", r.variant.as_str(), r.params, r.val_loss, r.val_loss / baseline);
    }
    println!("{:<10} {:>10} {:>12.6} {:>8.4}", "mixture", 0, baseline, 1.0);
    let mut f = fs::File::create(a.out.join("ablation.json"))?;
    serde_json::to_writer_pretty(&mut f, &rows)?;
    f.write_all(b"\n")?;
    Ok(())
}
