mod plot;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use swintext::bench::{bench, BENCH_CSV_HEADER};
use swintext::checkpoint::Checkpoint;
use swintext::config::{parse_config, RunConfig};
use swintext::dataset::{read_split, write_dataset};
use swintext::image::{read_pgm, resize_bilinear, write_pgm, GrayImage};
use swintext::metrics::{Confusion, THRESHOLD};
use swintext::model::SwinTextUNet;
use swintext::synth::{synth_generate, Split};
use swintext::text::{EmbeddingTable, TextSource};
use swintext::train::{csv_row, train, PreparedSet};
use swintext::verify::{self, Suite, VerifyOptions};
use swintext::{Tape, Tensor};

/// Seed of the deterministic stub text encoder used when no embedding file
/// is given. Training and inference must agree on it.
const STUB_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "swintext", version, about = "Text-guided shifted-window U-Net segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory; writes checkpoints, metrics.csv and loss.svg.
    Train(TrainArgs),
    /// Segment one image with a trained checkpoint.
    Infer(InferArgs),
    /// Per-image and mean Dice/IoU between two directories of PGM masks.
    Eval(EvalArgs),
    /// Run the built-in gradient, attention and metric checks.
    Verify(VerifyArgs),
    /// Count MACs and time global against windowed attention.
    Bench(BenchArgs),
    /// Write a synthetic text-conditioned dataset.
    GenData(GenDataArgs),
    /// Print parameter counts for a configuration.
    Params(ModelArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Flat `key: value` config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable text guidance entirely.
    #[arg(long)]
    no_text: bool,
    /// Replace ConvFuse skip fusion with plain addition.
    #[arg(long)]
    no_convfuse: bool,
    /// Fuse text by concatenation instead of cross-attention.
    #[arg(long)]
    no_crossattn: bool,
    /// Encoder depth variant.
    #[arg(long, value_parser = clap::value_parser!(u8).range(3..=5))]
    stages: Option<u8>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.stages {
            cfg.model = cfg.model.clone().with_stages(n as usize)?;
        }
        cfg.model.use_text &= !self.no_text;
        cfg.model.use_convfuse &= !self.no_convfuse;
        cfg.model.use_cross_attention &= !self.no_crossattn;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset root holding train/ and optionally val/.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = "SWINTEXT_SEED")]
    seed: Option<u64>,
    /// Overrides the config epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// CTXE embedding file; the stub encoder is used otherwise.
    #[arg(long)]
    emb_file: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: String,
    /// CTXE embedding file; the prompt must be present in it.
    #[arg(long)]
    emb_file: Option<PathBuf>,
    /// Binary mask output (PGM, 0/255).
    #[arg(long)]
    out: PathBuf,
    /// Optional probability map output (PGM, 0..255).
    #[arg(long)]
    prob_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradcheck,
    AttentionOracle,
    Metrics,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Seeds per property.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Add this to every analytic gradient (forced-failure self test).
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
    /// Skip the all-entries check of the micro model.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Token grid side; repeatable.
    #[arg(long, required = true, num_args = 1..)]
    grid: Vec<usize>,
    /// Window side; repeatable.
    #[arg(long, required = true, num_args = 1..)]
    window: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long, default_value_t = 96)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    heads: usize,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of samples across all splits.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "SWINTEXT_SEED", default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<swintext::Error>() {
                Some(swintext::Error::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn text_source(emb_file: Option<&Path>, cfg: &RunConfig) -> Result<TextSource> {
    Ok(match emb_file {
        Some(p) => TextSource::File {
            table: Arc::new(EmbeddingTable::read(p).with_context(|| format!("reading {}", p.display()))?),
            l2_normalize: cfg.train.normalize_loaded_embeddings,
        },
        None => TextSource::Stub {
            dim: cfg.model.text_dim,
            seed: STUB_SEED,
        },
    })
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = a.model.resolve()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.schedule.epochs = e;
    }
    cfg.validate()?;
    let source = text_source(a.emb_file.as_deref(), &cfg)?;
    let size = cfg.model.image_size;
    let train_set = PreparedSet::new(&read_split(&a.data, Split::Train)?, &source, size)?;
    let val_set = if a.data.join(Split::Val.name()).join("prompts.tsv").exists() {
        Some(PreparedSet::new(&read_split(&a.data, Split::Val)?, &source, size)?)
    } else {
        None
    };
    let variant = cfg.variant_name();
    eprintln!(
        "variant: {variant}; stages {}; train {} val {}; seed {}",
        cfg.model.num_stages(),
        train_set.len(),
        val_set.as_ref().map_or(0, |v| v.len()),
        cfg.train.seed
    );
    let out = train(&cfg, &train_set, val_set.as_ref(), Some(&a.out), |r| {
        eprintln!("{}", csv_row(r));
    })?;
    let title = format!("{variant} ({} stages)", cfg.model.num_stages());
    fs::write(a.out.join("loss.svg"), plot::loss_curve_svg(&out.records, &title))?;
    fs::write(a.out.join("variant.txt"), format!("{variant}\n"))?;
    println!("variant: {variant}");
    println!("best epoch: {}", out.best_epoch);
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let cfg = parse_config(&ck.config).context("checkpoint config")?;
    let (model, mut ps) = SwinTextUNet::new::<f32>(&cfg.model, 0)?;
    ck.restore(&mut ps)?;
    let img = read_pgm(&a.image)?;
    let s = cfg.model.image_size;
    let (w, h) = (img.width, img.height);
    let plane = resize_bilinear(&img.to_unit(), h, w, s, s);
    let c = cfg.model.in_channels;
    let pixels: Vec<f32> = (0..c).flat_map(|_| plane.iter().copied()).collect();

    let mut t = Tape::inference();
    let x = t.constant(Tensor::new(vec![1, c, s, s], pixels)?);
    let text = if cfg.model.use_text {
        let emb = text_source(a.emb_file.as_deref(), &cfg)?.resolve(&a.text)?;
        let v: Vec<f32> = emb.pooled.iter().map(|&v| v as f32).collect();
        Some(t.constant(Tensor::new(vec![1, 1, v.len()], v)?))
    } else {
        None
    };
    let out = model.forward(&mut t, &ps, x, text)?;
    let probs = resize_bilinear(t.value(out.probs).data(), s, s, h, w);
    let mask: Vec<bool> = probs.iter().map(|&p| p as f64 >= THRESHOLD).collect();
    write_pgm(&a.out, &GrayImage::from_mask(w, h, &mask)?)?;
    if let Some(p) = &a.prob_out {
        write_pgm(p, &GrayImage::from_unit(w, h, &probs)?)?;
    }
    let fg = mask.iter().filter(|&&b| b).count();
    println!("{}x{} mask, {fg} foreground pixels -> {}", w, h, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn pgm_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).with_context(|| format!("cannot read directory {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            out.insert(name);
        }
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let pred = pgm_names(&a.pred)?;
    let gt = pgm_names(&a.gt)?;
    if pred.is_empty() && gt.is_empty() {
        bail!("no .pgm files in {} or {}", a.pred.display(), a.gt.display());
    }
    let no_gt: Vec<_> = pred.difference(&gt).cloned().collect();
    let no_pred: Vec<_> = gt.difference(&pred).cloned().collect();
    if !no_gt.is_empty() || !no_pred.is_empty() {
        let mut msg = String::from("prediction and ground-truth files do not pair up");
        if !no_pred.is_empty() {
            let _ = write!(msg, "\n  missing in {}: {}", a.pred.display(), no_pred.join(", "));
        }
        if !no_gt.is_empty() {
            let _ = write!(msg, "\n  missing in {}: {}", a.gt.display(), no_gt.join(", "));
        }
        bail!(msg);
    }
    let mut rows = Vec::new();
    for name in &pred {
        let p = read_pgm(&a.pred.join(name))?;
        let g = read_pgm(&a.gt.join(name))?;
        if (p.width, p.height) != (g.width, g.height) {
            bail!(
                "{name}: prediction is {}x{}, ground truth {}x{}",
                p.width,
                p.height,
                g.width,
                g.height
            );
        }
        rows.push((name.clone(), Confusion::from_masks(&p.to_mask(), &g.to_mask())?));
    }
    let n = rows.len() as f64;
    let mean_dice = rows.iter().map(|(_, c)| c.dice()).sum::<f64>() / n;
    let mean_iou = rows.iter().map(|(_, c)| c.iou()).sum::<f64>() / n;

    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut table = format!("{:<width$}  {:>8}  {:>8}\n", "image", "dice", "iou");
    let mut csv = String::from("image,dice,iou,tp,fp,fn\n");
    for (name, c) in &rows {
        let _ = writeln!(table, "{name:<width$}  {:>8.4}  {:>8.4}", c.dice(), c.iou());
        let _ = writeln!(csv, "{name},{},{},{},{},{}", c.dice(), c.iou(), c.tp, c.fp, c.fn_);
    }
    let _ = writeln!(table, "{:<width$}  {mean_dice:>8.4}  {mean_iou:>8.4}", "mean");
    let _ = writeln!(csv, "mean,{mean_dice},{mean_iou},,,");
    print!("{table}");
    if let Some(p) = &a.csv {
        fs::write(p, csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let suite = match a.suite {
        SuiteArg::Gradcheck => Suite::Gradcheck,
        SuiteArg::AttentionOracle => Suite::AttentionOracle,
        SuiteArg::Metrics => Suite::Metrics,
        SuiteArg::All => Suite::All,
    };
    let opts = VerifyOptions {
        seeds: a.seeds.max(1),
        perturb: a.perturb,
        exhaustive_model: !a.quick,
    };
    let props = verify::run(suite, &opts)?;
    for p in &props {
        println!("{}", p.line());
    }
    let failed = props.iter().filter(|p| !p.passed).count();
    println!("{} properties, {} passed, {failed} failed", props.len(), props.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for &g in &a.grid {
        for &m in &a.window {
            let row = bench(g, m, a.channels, a.heads, a.repeat)?;
            let _ = writeln!(csv, "{}", row.csv());
        }
    }
    print!("{csv}");
    if let Some(p) = &a.out {
        fs::write(p, csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let samples = synth_generate(a.n, a.size, a.seed)?;
    write_dataset(&a.out, &samples)?;
    for split in Split::ALL {
        let k = samples.iter().filter(|(s, _)| *s == split).count();
        println!("{}: {k}", split.name());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_params(a: ModelArgs) -> Result<ExitCode> {
    let cfg = a.resolve()?;
    let (_, layout) = SwinTextUNet::layout(&cfg.model)?;
    let mut groups: Vec<(&str, usize)> = Vec::new();
    for (name, shape) in &layout {
        let group = name.split('.').next().unwrap_or("");
        let n: usize = shape.iter().product();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, c)) => *c += n,
            None => groups.push((group, n)),
        }
    }
    let total: usize = groups.iter().map(|(_, n)| n).sum();
    println!("variant: {}", cfg.variant_name());
    println!("stages: {}", cfg.model.num_stages());
    for (group, n) in groups {
        println!("{group:<16} {n:>12}");
    }
    println!("{:<16} {total:>12} ({:.2}M)", "total", total as f64 / 1e6);
    Ok(ExitCode::SUCCESS)
}
