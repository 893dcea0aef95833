use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use natmtl::config::Config;
use natmtl::data::{self, generate, load_corpus, ParallelCorpus, SyntheticTaskSpec, Task, Vocab};
use natmtl::metrics::{bleu, length_bucket_report, repetition_rate, MetricRecord, DEFAULT_BUCKETS};
use natmtl::teacher::distill;
use natmtl::training::{train, Loaded, NarSystem, TeacherSystem, TrainOutcome};

#[derive(Parser)]
#[command(
    name = "natmtl",
    version,
    about = "Non-autoregressive translation with auxiliary AR heads"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus (train/dev/test splits).
    GenData(GenData),
    /// Train a NAR model.
    Train(TrainArgs),
    /// Train the autoregressive teacher.
    TrainTeacher(TrainArgs),
    /// Replace training targets with teacher outputs.
    Distill(DistillArgs),
    /// Decode a source file with a checkpoint.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Train baselines and MTL models with several AR head depths.
    AblateArDepth(AblateArgs),
    /// Print the effective configuration with every key.
    ShowConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set mtl.enabled=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for s in &self.sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{s}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Vocabulary size including the reserved symbols.
    #[arg(long, default_value_t = 32)]
    vocab_size: usize,
    /// Training pairs.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    n_dev: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 4)]
    len_min: usize,
    #[arg(long, default_value_t = 16)]
    len_max: usize,
    /// Times each training source is repeated with a freshly drawn target.
    #[arg(long, default_value_t = 1)]
    source_repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: natmtl::Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory with train/dev `.src`/`.tgt` files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Output data directory; dev and test are copied unchanged.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Beam,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    mode: Mode,
    #[arg(long, default_value_t = 20)]
    beam_size: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Report {
    Bleu,
    Repetition,
    LengthBuckets,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "bleu")]
    report: Vec<Report>,
    /// Output file of JSON lines; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,6")]
    depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a, false),
        Cmd::TrainTeacher(a) => train_cmd(a, true),
        Cmd::Distill(a) => distill_cmd(a),
        Cmd::Decode(a) => decode_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::AblateArDepth(a) => ablate(a),
        Cmd::ShowConfig(a) => {
            print!("{}", a.load()?.render());
            Ok(())
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = |n: usize, seed: u64, repeats: usize| SyntheticTaskSpec {
        len_min: a.len_min,
        len_max: a.len_max,
        source_repeats: repeats,
        ..SyntheticTaskSpec::new(a.task, a.vocab_size, n, seed)
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    generate(&spec(a.n, a.seed, a.source_repeats))?.write(&a.out, "train")?;
    generate(&spec(a.n_dev, a.seed.wrapping_add(1 << 32), 1))?.write(&a.out, "dev")?;
    generate(&spec(a.n_test, a.seed.wrapping_add(2 << 32), 1))?.write(&a.out, "test")?;
    log::info!("wrote {} training pairs to {}", a.n, a.out.display());
    Ok(())
}

fn split(dir: &Path, name: &str) -> Result<ParallelCorpus> {
    Ok(load_corpus(
        &dir.join(format!("{name}.src")),
        &dir.join(format!("{name}.tgt")),
    )?)
}

fn train_on(cfg: &Config, data: &Path, out: &Path, teacher: bool) -> Result<(TrainOutcome, Vocab)> {
    let tr = split(data, "train")?;
    let dev = split(data, "dev")?;
    let vocab = Vocab::build(&tr, None)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.render())
        .with_context(|| format!("writing to {}", out.display()))?;
    let (tr, dev) = (tr.encode(&vocab), dev.encode(&vocab));
    let outcome = if teacher {
        train(
            &TeacherSystem::new(cfg, vocab.len())?,
            cfg,
            &vocab,
            &tr,
            &dev,
            Some(out),
        )?
    } else {
        train(
            &NarSystem::new(cfg, vocab.len())?,
            cfg,
            &vocab,
            &tr,
            &dev,
            Some(out),
        )?
    };
    Ok((outcome, vocab))
}

fn train_cmd(a: TrainArgs, teacher: bool) -> Result<()> {
    let cfg = a.config.load()?;
    let (outcome, _) = train_on(&cfg, &a.data, &a.out, teacher)?;
    if let Some(r) = outcome.records.last() {
        println!(
            "step {} dev_bleu {:.2} repetition {:.4}",
            r.step, r.dev_bleu, r.repetition_rate
        );
    }
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let loaded = Loaded::load(&a.teacher)?;
    let teacher = loaded.teacher()?;
    let tr = split(&a.data, "train")?;
    let distilled = distill(&teacher, &loaded.params, &loaded.vocab, &tr, a.beam)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    distilled.write(&a.out, "train")?;
    for name in ["dev", "test"] {
        for ext in ["src", "tgt"] {
            let from = a.data.join(format!("{name}.{ext}"));
            if from.exists() {
                fs::copy(&from, a.out.join(format!("{name}.{ext}")))
                    .with_context(|| format!("copying {}", from.display()))?;
            }
        }
    }
    let modes = |c: &ParallelCorpus| {
        let m = c.targets_per_repeated_source();
        m.values().sum::<usize>() as f64 / m.len().max(1) as f64
    };
    log::info!(
        "distinct targets per repeated source: raw {:.3}, distilled {:.3}",
        modes(&tr),
        modes(&distilled)
    );
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let loaded = Loaded::load(&a.ckpt)?;
    let src: Vec<Vec<usize>> = data::read_lines(&a.src)?
        .iter()
        .map(|l| loaded.vocab.encode(&data::tokenize(l)))
        .collect();
    if let Some(i) = src.iter().position(Vec::is_empty) {
        bail!("{}: line {} is empty", a.src.display(), i + 1);
    }
    let beam = match a.mode {
        Mode::Greedy => 1,
        Mode::Beam => a.beam_size,
    };
    let hyps = loaded.decode(&src, beam)?;
    let lines: Vec<String> = hyps
        .iter()
        .map(|h| loaded.vocab.decode(h).join(" "))
        .collect();
    emit(a.out.as_deref(), &lines)
}

fn emit(out: Option<&Path>, lines: &[String]) -> Result<()> {
    match out {
        Some(p) => data::write_lines(p, lines)?,
        None => lines.iter().for_each(|l| println!("{l}")),
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<Vec<String>>> {
        Ok(data::read_lines(p)?
            .iter()
            .map(|l| data::tokenize(l))
            .collect())
    };
    let hyps = read(&a.hyp)?;
    let refs = read(&a.reference)?;
    if hyps.len() != refs.len() {
        bail!(
            "{} has {} lines but {} has {}",
            a.hyp.display(),
            hyps.len(),
            a.reference.display(),
            refs.len()
        );
    }
    let mut lines = Vec::new();
    for r in &a.report {
        match r {
            Report::Bleu => {
                lines.push(MetricRecord::bleu(&bleu(&hyps, &refs)?, hyps.len(), None).to_json())
            }
            Report::Repetition => lines.push(
                MetricRecord {
                    metric: "repetition_rate".into(),
                    value: repetition_rate(&hyps),
                    n_sentences: hyps.len(),
                    bucket: None,
                    smoothing: None,
                }
                .to_json(),
            ),
            Report::LengthBuckets => {
                for b in length_bucket_report(&hyps, &refs, &DEFAULT_BUCKETS)? {
                    lines.push(
                        MetricRecord::bleu(&b.bleu, b.n_sentences, Some(b.bucket.label()))
                            .to_json(),
                    );
                }
            }
        }
    }
    emit(a.out.as_deref(), &lines)
}

fn test_bleu(ckpt: &natmtl::checkpoint::Checkpoint, test: &ParallelCorpus) -> Result<f64> {
    let loaded = Loaded::from_checkpoint(ckpt)?;
    let src: Vec<Vec<usize>> = test
        .pairs
        .iter()
        .map(|p| loaded.vocab.encode(&p.src))
        .collect();
    let refs: Vec<Vec<usize>> = test
        .pairs
        .iter()
        .map(|p| loaded.vocab.encode(&p.tgt))
        .collect();
    let hyps = loaded.decode(&src, 1)?;
    Ok(bleu(&hyps, &refs)?.score)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = a.config.load()?;
    let test = split(&a.data, "test")?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut lines = Vec::new();
    for &seed in &a.seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        cfg.mtl.enabled = false;
        let (o, _) = train_on(
            &cfg,
            &a.data,
            &a.out.join(format!("seed{seed}-baseline")),
            false,
        )?;
        let baseline = test_bleu(&o.averaged, &test)?;
        lines.push(format!(
            r#"{{"seed":{seed},"depth":0,"test_bleu":{baseline}}}"#
        ));
        for &d in &a.depths {
            cfg.mtl.enabled = true;
            cfg.mtl.ar_head_depth = d;
            let (o, _) = train_on(
                &cfg,
                &a.data,
                &a.out.join(format!("seed{seed}-depth{d}")),
                false,
            )?;
            let b = test_bleu(&o.averaged, &test)?;
            log::info!("seed {seed} depth {d}: test bleu {b:.2} (baseline {baseline:.2})");
            lines.push(format!(
                r#"{{"seed":{seed},"depth":{d},"test_bleu":{b},"gain":{}}}"#,
                b - baseline
            ));
        }
    }
    data::write_lines(&a.out.join("summary.jsonl"), &lines)?;
    lines.iter().for_each(|l| println!("{l}"));
    Ok(())
}
