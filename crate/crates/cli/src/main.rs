//! `dmha`: synthetic corpus generation, training, embedding extraction,
//! scoring and evaluation for attention-pooled speaker embeddings.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dmha::checkpoint::Checkpoint;
use dmha::config::RunConfig;
use dmha::eval::{
    evaluate, extract_embeddings, load_trials, parse_scores, score_trials, scores_to_text, trial_ids, DcfConfig,
    EmbeddingSet, Report, ScoredTrial, Trial,
};
use dmha::features::{read_wav_checked, FeatureExtractor};
use dmha::gradsuite;
use dmha::pooling::PoolingKind;
use dmha::synth::{all_trials, generate_corpus, make_trials, Manifest, SynthConfig};
use dmha::trainer::{load_model_file, log_to_csv, Dataset, Trainer};

#[derive(Parser)]
#[command(name = "dmha", version, about = "Speaker verification with double multi-head attention pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, a train/test split and a trial list.
    Synth(SynthArgs),
    /// Train a speaker classifier and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Embed every utterance of a manifest.
    Extract(ExtractArgs),
    /// Cosine-score a trial list against an embedding file.
    Score(ScoreArgs),
    /// EER and minimum DCF of a trial list.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every layer.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 16)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts: usize,
    /// Utterance length in seconds.
    #[arg(long, default_value_t = 4.0)]
    duration: f64,
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
    /// Utterances per speaker moved to the test manifest.
    #[arg(long, default_value_t = 3)]
    hold_out: usize,
    /// Sample this many target trials instead of listing every pair.
    #[arg(long, requires = "num_nontarget")]
    num_target: Option<usize>,
    #[arg(long, requires = "num_target")]
    num_nontarget: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    pooling: Option<PoolingKind>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from a `state.ckpt`. The run configuration comes from it;
    /// only `--epochs` may change.
    #[arg(long, conflicts_with_all = ["pooling", "heads", "batch_size", "lr", "config", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write per-utterance attention weights under `attention/`.
    #[arg(long)]
    attention: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, group = "source")]
    embeddings: Option<PathBuf>,
    #[arg(long, group = "source", requires = "manifest")]
    checkpoint: Option<PathBuf>,
    /// Existing score file in trial order.
    #[arg(long, group = "source")]
    scores: Option<PathBuf>,
    /// Audio manifest for `--checkpoint`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Number of seeds per layer.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn parse_kind(s: &str) -> std::result::Result<PoolingKind, String> {
    s.parse::<PoolingKind>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("dmha: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dmha: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::desk(),
    };
    if let Some(s) = common.seed {
        run.train.seed = s;
    }
    Ok(run)
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    Ok(&common.out_dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let seed = base_config(&a.common)?.train.seed;
    let cfg = SynthConfig {
        num_speakers: a.speakers,
        utts_per_speaker: a.utts,
        duration_s: a.duration,
        snr_db: a.snr_db,
        seed,
        ..SynthConfig::default()
    };
    let dir = out_dir(&a.common)?;
    let manifest = generate_corpus(&cfg, dir)?;
    let (train, test) = manifest.hold_out(a.hold_out)?;
    train.save(&dir.join("train.tsv"))?;
    test.save(&dir.join("test.tsv"))?;
    let trials = match (a.num_target, a.num_nontarget) {
        (Some(t), Some(n)) => make_trials(&test, t, n, seed)?,
        _ => all_trials(&test)?,
    };
    write(&dir.join("trials.txt"), &dmha::eval::trials_to_text(&trials))?;
    println!(
        "{} utterances ({} train, {} test), {} trials in {}",
        manifest.entries.len(),
        train.entries.len(),
        test.entries.len(),
        trials.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let dir = out_dir(&a.common)?.to_path_buf();
    let manifest = load_manifest(&a.manifest)?;
    let (run, resume) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?;
            let mut run = RunConfig::default();
            run.apply_pairs(
                ckpt.config
                    .iter()
                    .filter(|(k, _)| !k.starts_with("state."))
                    .map(|(k, v)| (k.as_str(), v.as_str())),
            )?;
            (run, Some(ckpt))
        }
        None => {
            let mut run = base_config(&a.common)?;
            if let Some(k) = a.pooling {
                run.model.pooling.kind = k;
            }
            if let Some(h) = a.heads {
                run.model.pooling.heads = h;
            }
            if let Some(e) = a.epochs {
                run.train.max_epochs = e;
            }
            if let Some(b) = a.batch_size {
                run.train.batch_size = b;
            }
            if let Some(lr) = a.lr {
                run.train.lr = lr;
            }
            (run, None)
        }
    };
    let fx = FeatureExtractor::new(run.model.features.clone())?;
    let data = Dataset::load(&fx, &manifest)?;
    let (train_set, val_set) = data.split(run.train.validation_fraction, run.train.seed)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = Trainer::resume(&ckpt, train_set, val_set)?;
            if let Some(e) = a.epochs {
                t.set_max_epochs(e);
            }
            t
        }
        None => {
            let mut run = run;
            run.model.num_speakers = data.num_speakers();
            Trainer::new(run, train_set, val_set)?
        }
    };
    write(&dir.join("run.conf"), &trainer.run_config().to_text())?;
    trainer.train(|t, e| {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  lr {:e}",
            e.epoch, e.train_loss, e.val_loss, e.lr
        );
        t.checkpoint().save(&dir.join("state.ckpt"))?;
        t.best_checkpoint().save(&dir.join("model.ckpt"))?;
        std::fs::write(dir.join("train_log.csv"), log_to_csv(t.log()))?;
        Ok(())
    })?;
    trainer.best_checkpoint().save(&dir.join("model.ckpt"))?;
    println!("best validation loss {:.4}; wrote {}", trainer.state().scheduler.best, dir.join("model.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn extract(a: ExtractArgs) -> Result<ExitCode> {
    let dir = out_dir(&a.common)?;
    let (run, model) = load_model_file(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = load_manifest(&a.manifest)?;
    let fx = FeatureExtractor::new(run.model.features.clone())?;
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.utterance.clone()).collect();
    let set = extract_embeddings(&model, &fx, &manifest, &ids)?;
    let path = dir.join("embeddings.txt");
    set.save(&path)?;
    if a.attention {
        let att_dir = dir.join("attention");
        fs::create_dir_all(&att_dir)?;
        for e in &manifest.entries {
            let audio = read_wav_checked(&e.path, fx.config())?;
            let mel = fx.features(&audio, fx.config().sample_rate)?;
            let (_, w) = model.embed_with_attention(&mel)?;
            write(&att_dir.join(format!("{}.txt", e.utterance)), &w.to_text())?;
        }
    }
    println!("{} embeddings of dimension {} in {}", set.len(), set.dim(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    load_trials(path).with_context(|| format!("reading {}", path.display()))
}

fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    EmbeddingSet::load(path).with_context(|| format!("reading {}", path.display()))
}

fn score(a: ScoreArgs) -> Result<ExitCode> {
    let dir = out_dir(&a.common)?;
    let trials = read_trials(&a.trials)?;
    let scores = score_trials(&trials, &load_embeddings(&a.embeddings)?)?;
    let path = dir.join("scores.txt");
    write(&path, &scores_to_text(&scores))?;
    println!("{} scores in {}", scores.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let trials = read_trials(&a.trials)?;
    let dcf = DcfConfig::default();
    let (scores, report): (Option<Vec<ScoredTrial>>, Report) = if let Some(p) = &a.scores {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let scores = parse_scores(&text, &trials)?;
        (None, Report::from_scores(&scores, &dcf)?)
    } else if let Some(p) = &a.embeddings {
        let (s, r) = evaluate(&trials, &load_embeddings(p)?, &dcf)?;
        (Some(s), r)
    } else if let Some(p) = &a.checkpoint {
        let (run, model) = load_model_file(p).with_context(|| format!("loading {}", p.display()))?;
        let manifest = load_manifest(a.manifest.as_deref().expect("required by clap"))?;
        let fx = FeatureExtractor::new(run.model.features.clone())?;
        if trials.is_empty() {
            bail!("empty trial list");
        }
        let emb = extract_embeddings(&model, &fx, &manifest, &trial_ids(&trials))?;
        let (s, r) = evaluate(&trials, &emb, &dcf)?;
        (Some(s), r)
    } else {
        bail!("eval needs one of --embeddings, --checkpoint or --scores");
    };
    println!("{}", report.summary());
    print!("{}", report.to_kv());
    let dir = out_dir(&a.common)?;
    write(&dir.join("report.txt"), &format!("{}\n{}", report.summary(), report.to_kv()))?;
    if let Some(s) = scores {
        write(&dir.join("scores.txt"), &scores_to_text(&s))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let first = a.common.seed.unwrap_or(0);
    let seeds: Vec<u64> = (first..first + a.seeds.max(1)).collect();
    let rows = gradsuite::run_suite(&seeds)?;
    print!("{}", gradsuite::format_table(&rows));
    Ok(if rows.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
