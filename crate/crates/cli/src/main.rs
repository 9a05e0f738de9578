use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use distcap::ciderscore::{cider, tokenize, References};
use distcap::distmetrics::{evaluate_split, gap_avg, gap_min, DEFAULT_KS};
use distcap::embedstore::{cosine, store_paths, EmbeddingStore, EntryId, EntryKind};
use distcap::groups::{build_all, GroupFile, DEFAULT_K};
use distcap::scstreward::{RewardConfig, RewardMode};
use distcap::toytrain::{
    evaluate, train, LrSchedule, Optimizer, ToyError, ToyWorld, TrainOptions,
    WorldParams, DEFAULT_LR,
};

const EXIT_INPUT: u8 = 2;
const EXIT_DEGRADED: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "distcap", version, about = "Caption distinctiveness toolkit")]
struct Cli {
    /// Worker threads for parallel stages (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the similar-image group of every image in a split.
    BuildGroups(BuildGroupsArgs),
    /// Retrieval recall and group embedding gaps of generated captions.
    Eval(EvalArgs),
    /// Score candidate captions with the weighted reward.
    Reward(RewardArgs),
    /// Train the synthetic toy policy with self-critical updates.
    TrainToy(TrainToyArgs),
}

#[derive(Args)]
struct BuildGroupsArgs {
    /// Image store prefix (`<prefix>.mat` + `<prefix>.tsv`).
    #[arg(long)]
    images: PathBuf,
    /// Ground-truth caption store prefix.
    #[arg(long)]
    captions: PathBuf,
    /// Group size.
    #[arg(short = 'K', default_value_t = DEFAULT_K)]
    k: usize,
    /// Output group file.
    #[arg(long)]
    out: PathBuf,
    /// Split name recorded in the group file header.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write groups even when some needed the full-split fallback or have
    /// fewer than K members.
    #[arg(long)]
    allow_fallback: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Image store prefix.
    #[arg(long)]
    images: PathBuf,
    /// Generated caption store prefix.
    #[arg(long)]
    captions: PathBuf,
    /// Group file written by build-groups.
    #[arg(long)]
    groups: PathBuf,
    /// Comma-separated recall cut-offs.
    #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
    ks: Vec<usize>,
    /// File with one gallery image id per line (default: every image).
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Report file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-caption table.
    #[arg(long)]
    per_caption: Option<PathBuf>,
}

#[derive(Args)]
struct RewardFlags {
    /// Key-value config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Group size.
    #[arg(short = 'K')]
    k: Option<usize>,
    /// Weight of the CIDEr term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the group-gap term.
    #[arg(long)]
    beta: Option<f64>,
    /// CIDER_ONLY, ER, GEG_AVG, GEG_MIN or GEG_SOLE.
    #[arg(long)]
    mode: Option<RewardMode>,
}

#[derive(Args)]
struct RewardArgs {
    #[command(flatten)]
    reward: RewardFlags,
    /// Image store prefix.
    #[arg(long)]
    images: PathBuf,
    /// Candidate caption embedding store prefix.
    #[arg(long)]
    captions: PathBuf,
    /// Group file written by build-groups.
    #[arg(long)]
    groups: PathBuf,
    /// Candidate texts, `caption_id<TAB>text` per line.
    #[arg(long, requires = "refs", conflicts_with = "cider_scores")]
    candidates: Option<PathBuf>,
    /// Reference captions, `image_id<TAB>text` per line.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Precomputed CIDEr values, `caption_id<TAB>score` per line.
    #[arg(long, required_unless_present = "candidates")]
    cider_scores: Option<PathBuf>,
    /// Output table (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainToyArgs {
    #[command(flatten)]
    reward: RewardFlags,
    /// Seeds both the world and the sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of training epochs.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    /// Parameter update rule.
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Output prefix: writes `<out>.log`, `<out>.policy.*` and `<out>.world.*`.
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_INPUT,
            error: e.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

fn require_store(prefix: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    let (mat, tsv) = store_paths(prefix);
    require_file(&mat)?;
    require_file(&tsv)?;
    Ok((mat, tsv))
}

fn load_store(paths: &(PathBuf, PathBuf)) -> anyhow::Result<EmbeddingStore> {
    EmbeddingStore::load(&paths.0, &paths.1)
        .with_context(|| format!("loading {} / {}", paths.0.display(), paths.1.display()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

impl RewardFlags {
    fn resolve(&self) -> anyhow::Result<RewardConfig> {
        let mut c = match &self.config {
            Some(p) => {
                require_file(p)?;
                RewardConfig::load(p)?
            }
            None => RewardConfig::default(),
        };
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(b) = self.beta {
            c.beta = b;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        c.validate()?;
        Ok(c)
    }
}

fn cmd_build_groups(a: &BuildGroupsArgs) -> CmdResult {
    let image_paths = require_store(&a.images)?;
    let caption_paths = require_store(&a.captions)?;
    let start = Instant::now();
    let images = load_store(&image_paths)?;
    let captions = load_store(&caption_paths)?;
    let summary = build_all(&images, &captions, a.k, &a.split)?;
    if !summary.degraded.is_empty() {
        let listed: Vec<String> = summary
            .degraded
            .iter()
            .take(5)
            .map(|(id, d)| format!("{id} ({d:?})"))
            .collect();
        let msg = format!(
            "{} of {} groups degraded: {}{}",
            summary.degraded.len(),
            summary.file.groups.len(),
            listed.join(", "),
            if summary.degraded.len() > listed.len() { ", ..." } else { "" }
        );
        if !a.allow_fallback {
            return Err(Failure {
                code: EXIT_DEGRADED,
                error: anyhow!("{msg}; rerun with --allow-fallback to accept"),
            });
        }
        eprintln!("warning: {msg}");
    }
    summary.file.save(&a.out)?;
    println!(
        "wrote {} groups (K={}) to {} in {:.3}s",
        summary.file.groups.len(),
        a.k,
        a.out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn read_gallery(path: &Path) -> anyhow::Result<Vec<EntryId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| EntryId::new(l).map_err(Into::into))
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let image_paths = require_store(&a.images)?;
    let caption_paths = require_store(&a.captions)?;
    require_file(&a.groups)?;
    if let Some(g) = &a.gallery {
        require_file(g)?;
    }
    let images = load_store(&image_paths)?;
    let generated = load_store(&caption_paths)?;
    let groups = GroupFile::load(&a.groups)?;
    let gallery = match &a.gallery {
        Some(p) => read_gallery(p)?,
        None => images.ids_of_kind(EntryKind::Image).cloned().collect(),
    };
    let ks = if a.ks.is_empty() { DEFAULT_KS.to_vec() } else { a.ks.clone() };
    let report = evaluate_split(&images, &generated, &groups, &gallery, &ks)?;
    write_or_print(a.out.as_deref(), &report.aggregate.to_text())?;
    if let Some(p) = &a.per_caption {
        fs::write(p, report.per_caption_table()).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.out.is_some() {
        println!("{}", report.aggregate.summary_line());
    }
    Ok(())
}

/// `id<TAB>value` records in file order.
fn read_pairs(path: &Path) -> anyhow::Result<Vec<(EntryId, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, rest) = l
                .split_once('\t')
                .ok_or_else(|| anyhow!("{} line {}: expected `id<TAB>value`", path.display(), i + 1))?;
            Ok((EntryId::new(id)?, rest.to_string()))
        })
        .collect()
}

fn cmd_reward(a: &RewardArgs) -> CmdResult {
    let config = a.reward.resolve()?;
    let image_paths = require_store(&a.images)?;
    let caption_paths = require_store(&a.captions)?;
    require_file(&a.groups)?;
    for p in [&a.candidates, &a.refs, &a.cider_scores].into_iter().flatten() {
        require_file(p)?;
    }
    let images = load_store(&image_paths)?;
    let captions = load_store(&caption_paths)?;
    let groups = GroupFile::load(&a.groups)?;
    let by_target = groups.index();

    // (caption id, CIDEr) in input order
    let scored: Vec<(EntryId, f64)> = match (&a.candidates, &a.cider_scores) {
        (Some(cands), _) => {
            let refs = References::load(a.refs.as_deref().expect("clap enforces --refs"))?;
            let idf = refs.idf()?;
            read_pairs(cands)?
                .into_iter()
                .map(|(id, text)| {
                    let owner = caption_owner(&captions, &id)?;
                    let r = refs
                        .get(owner.as_str())
                        .ok_or_else(|| anyhow!("no references for image `{owner}`"))?;
                    let c = cider(&tokenize(&text), r, &idf)?;
                    Ok((id, c))
                })
                .collect::<anyhow::Result<_>>()?
        }
        (None, Some(scores)) => read_pairs(scores)?
            .into_iter()
            .map(|(id, v)| {
                let c: f64 = v
                    .trim()
                    .parse()
                    .ok()
                    .filter(|x: &f64| x.is_finite())
                    .ok_or_else(|| anyhow!("bad CIDEr value `{v}` for `{id}`"))?;
                Ok((id, c))
            })
            .collect::<anyhow::Result<_>>()?,
        (None, None) => unreachable!("clap requires one CIDEr source"),
    };

    let mut out = String::from("caption_id\tcider\ttarget_sim\tgap\treward\n");
    for (id, c) in &scored {
        let owner = caption_owner(&captions, id)?;
        let emb = captions.get(id.as_str())?;
        let group = by_target
            .get(owner.as_str())
            .ok_or_else(|| anyhow!("no similar group for image `{owner}`"))?;
        let target_sim = cosine(images.get(owner.as_str())?, emb)?;
        let sims = group
            .member_ids()
            .map(|m| Ok(cosine(images.get(m.as_str())?, emb)?))
            .collect::<anyhow::Result<Vec<f64>>>()?;
        if sims.is_empty() {
            return Err(anyhow!("similar group for `{owner}` is empty").into());
        }
        let gap = match config.mode {
            RewardMode::GegMin => gap_min(target_sim, &sims),
            _ => gap_avg(target_sim, &sims),
        };
        let reward = distcap::scstreward::combined_reward(&config, *c, target_sim, &sims)?;
        let _ = writeln!(out, "{id}\t{c:.6}\t{target_sim:.6}\t{gap:.6}\t{reward:.6}");
    }
    write_or_print(a.out.as_deref(), &out)?;
    Ok(())
}

fn caption_owner(captions: &EmbeddingStore, id: &EntryId) -> anyhow::Result<EntryId> {
    let row = captions
        .row_index(id.as_str())
        .ok_or_else(|| anyhow!("unknown caption id `{id}`"))?;
    captions
        .entry_at_row(row)
        .owner
        .clone()
        .ok_or_else(|| anyhow!("entry `{id}` is not a caption"))
}

fn cmd_train_toy(a: &TrainToyArgs) -> CmdResult {
    let config = a.reward.resolve()?;
    if !(a.lr.is_finite() && a.lr > 0.0 && a.lr_decay.is_finite() && a.lr_decay > 0.0) {
        return Err(anyhow!("--lr and --lr-decay must be positive").into());
    }
    let world = ToyWorld::new(WorldParams {
        seed: a.seed,
        k: config.k,
        ..WorldParams::default()
    })?;
    let options = TrainOptions {
        epochs: a.epochs,
        schedule: if a.lr_decay == 1.0 {
            LrSchedule::Constant(a.lr)
        } else {
            LrSchedule::Exponential {
                initial: a.lr,
                decay: a.lr_decay,
            }
        },
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::ADAM,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed: a.seed,
    };
    let outcome = match train(&world, &config, &options) {
        Ok(o) => o,
        Err(e @ ToyError::DivergenceDetected { .. }) => {
            return Err(Failure {
                code: EXIT_DIVERGED,
                error: anyhow!(e).context("training diverged; lower --lr"),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let log_path = with_suffix(&a.out, ".log");
    fs::write(&log_path, outcome.log.to_text())
        .with_context(|| format!("writing {}", log_path.display()))?;
    outcome.policy.save(&with_suffix(&a.out, ".policy"))?;
    world.save(&with_suffix(&a.out, ".world"))?;

    let last = match outcome.log.last() {
        Some(e) => *e,
        None => evaluate(&world, &outcome.policy, &config, 0)?,
    };
    println!(
        "epoch={} mode={} mean_reward={:.6} GEG_AVG={:.6} GEG_MIN={:.6} R1={:.4} CIDER={:.6}",
        last.epoch,
        config.mode,
        last.mean_reward,
        last.mean_geg_avg,
        last.mean_geg_min,
        last.r_at_1,
        last.mean_cider
    );
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(anyhow!("--threads must be positive").into());
        }
        pool = pool.num_threads(n);
    }
    pool.build_global().context("starting worker pool")?;
    match &cli.command {
        Command::BuildGroups(a) => cmd_build_groups(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reward(a) => cmd_reward(a),
        Command::TrainToy(a) => cmd_train_toy(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
