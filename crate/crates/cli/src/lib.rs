//! Argument parsing and subcommands of the `agla` binary.

use std::fs;
use std::path::{Path, PathBuf};

use agla_core::bench::{augment, run_bench, Augmentation, BenchConfig};
use agla_core::decoding::{answer_presence, generate, traces_to_jsonl, AnswerTokens, DecoderConfig, Filter, Sampler};
use agla_core::masking::{AugmentedContent, GridImage, Strategy};
use agla_core::numeric::Matrix;
use agla_core::toy::{BenchmarkKind, Testbed, TestbedConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "agla", version, about = "Assembled global/local decoding on a synthetic vision-language testbed")]
pub struct Cli {
    /// Testbed constants (JSON); defaults to the built-in calibrated set.
    #[arg(long, global = true)]
    pub testbed: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a scene to a PGM image.
    Render(RenderArgs),
    /// Similarity, correlation map, heatmap and mask for an image-prompt pair.
    Match(ViewArgs),
    /// Write the augmented view of an image-prompt pair.
    Mask(ViewArgs),
    /// Answer a presence question.
    Decode(DecodeArgs),
    /// Generate a caption.
    Generate(DecodeArgs),
    /// Run a synthetic benchmark with both decoding arms.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Comma-separated `object:patch` placements, e.g. `dog:3,sofa:9`.
    #[arg(long, default_value = "")]
    pub objects: String,
    #[arg(long, env = "AGLA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    /// Grayscale PGM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, value_enum, default_value_t = StrategyArg::Pixel)]
    pub strategy: StrategyArg,
    #[arg(long, env = "AGLA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Pixel,
    Patch,
    Soft,
    Feature,
    Random,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Pixel => Strategy::Pixel,
            StrategyArg::Patch => Strategy::Patch,
            StrategyArg::Soft => Strategy::Soft,
            StrategyArg::Feature => Strategy::Feature,
            StrategyArg::Random => Strategy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Greedy,
    Multinomial,
    #[value(name = "top_p")]
    TopP,
    #[value(name = "top_k")]
    TopK,
    Temp,
}

#[derive(Debug, Clone, Args)]
pub struct DecoderArgs {
    /// Weight of the augmented-view logits.
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub alpha: f64,
    /// Plausibility truncation strength.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long, value_enum, default_value_t = SamplerArg::Multinomial)]
    pub sampler: SamplerArg,
    #[arg(long, default_value_t = 0.7)]
    pub p: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Temperature; with top_p or top_k it is applied after the filter.
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
}

impl DecoderArgs {
    pub fn decoder(&self, seed: u64) -> Result<DecoderConfig> {
        let sampler = match (self.sampler, self.t) {
            (SamplerArg::Greedy, _) => Sampler::Greedy,
            (SamplerArg::Multinomial, None) => Sampler::Multinomial,
            (SamplerArg::Multinomial, Some(t)) | (SamplerArg::Temp, Some(t)) => Sampler::Temperature(t),
            (SamplerArg::Temp, None) => Sampler::Temperature(0.5),
            (SamplerArg::TopP, None) => Sampler::TopP(self.p),
            (SamplerArg::TopK, None) => Sampler::TopK(self.k),
            (SamplerArg::TopP, Some(t)) => Sampler::Composed { filter: Filter::TopP(self.p), temperature: t },
            (SamplerArg::TopK, Some(t)) => Sampler::Composed { filter: Filter::TopK(self.k), temperature: t },
        };
        let cfg = DecoderConfig { alpha: self.alpha, beta: self.beta, sampler, max_len: self.max_len, seed };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[arg(long, value_enum, default_value_t = StrategyArg::Pixel)]
    pub strategy: StrategyArg,
    /// Attention deficiency of the stand-in model [default: testbed value].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Decode from the original view only.
    #[arg(long)]
    pub regular: bool,
    #[arg(long, env = "AGLA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Directory for the per-step trace.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "pope-adversarial")]
    pub kind: String,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0.8)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Pixel)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[arg(long, env = "AGLA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_testbed(path: Option<&Path>) -> Result<Testbed> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TestbedConfig::default(),
    };
    Ok(Testbed::new(cfg)?)
}

fn load_image(testbed: &Testbed, path: &Path) -> Result<GridImage> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let image = GridImage::from_pgm(&text, testbed.config().patch_size).with_context(|| format!("parsing {}", path.display()))?;
    let (w, h) = (testbed.config().grid_width, testbed.config().grid_height);
    if image.grid_width() != w || image.grid_height() != h {
        bail!("{} has a {}x{} patch grid, the testbed expects {w}x{h}", path.display(), image.grid_width(), image.grid_height());
    }
    Ok(image)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let testbed = load_testbed(cli.testbed.as_deref())?;
    match cli.command {
        Command::Render(a) => cmd_render(&testbed, &a),
        Command::Match(a) => cmd_match(&testbed, &a),
        Command::Mask(a) => cmd_mask(&testbed, &a),
        Command::Decode(a) => cmd_decode(&testbed, &a, false),
        Command::Generate(a) => cmd_decode(&testbed, &a, true),
        Command::Bench(a) => cmd_bench(&testbed, &a),
    }
}

fn cmd_render(testbed: &Testbed, a: &RenderArgs) -> Result<()> {
    let mut placements = Vec::new();
    for item in a.objects.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (obj, patch) = item.split_once(':').with_context(|| format!("placement {item:?} is not object:patch"))?;
        let patch: usize = patch.parse().with_context(|| format!("bad patch index in {item:?}"))?;
        placements.push((obj, patch));
    }
    let spec = testbed.scene(&placements, a.seed);
    let (image, _) = testbed.render_scene(&spec)?;
    write(a.out.clone(), image.to_pgm())
}

fn view_of(testbed: &Testbed, a: &ViewArgs) -> Result<(GridImage, Augmentation)> {
    let image = load_image(testbed, &a.image)?;
    let prompt = testbed.lexicon().tokenize(&a.prompt)?;
    let aug = augment(testbed, &image, &prompt, a.strategy.into(), a.seed)?;
    Ok((image, aug))
}

fn cmd_match(testbed: &Testbed, a: &ViewArgs) -> Result<()> {
    let (image, aug) = view_of(testbed, a)?;
    fs::create_dir_all(&a.out)?;
    let sim = format!("{:.6}", aug.similarity.sim);
    write(a.out.join("sim.txt"), format!("{sim}\n"))?;
    write(a.out.join("correlation.txt"), aug.correlation.to_text())?;
    write(a.out.join("heatmap.pgm"), aug.correlation.to_pgm(image.grid_width(), image.grid_height())?)?;
    write(a.out.join("mask.pgm"), aug.view.mask.to_pgm(&image))?;
    println!("{sim}");
    Ok(())
}

fn cmd_mask(testbed: &Testbed, a: &ViewArgs) -> Result<()> {
    let (image, aug) = view_of(testbed, a)?;
    fs::create_dir_all(&a.out)?;
    match &aug.view.content {
        AugmentedContent::Image(img) => write(a.out.join("augmented.pgm"), img.to_pgm())?,
        AugmentedContent::Features(f) => write(a.out.join("features.txt"), f.to_text())?,
    }
    write(a.out.join("mask.pgm"), aug.view.mask.to_pgm(&image))?;
    let summary = serde_json::json!({
        "strategy": aug.view.spec.strategy,
        "ratio": aug.view.spec.ratio,
        "sim": aug.similarity.sim,
        "masked": aug.view.mask.masked_count(),
    });
    write(a.out.join("view.json"), summary.to_string() + "\n")?;
    println!("masked {} at ratio {:.6}", aug.view.mask.masked_count(), aug.view.spec.ratio);
    Ok(())
}

fn cmd_decode(testbed: &Testbed, a: &DecodeArgs, caption: bool) -> Result<()> {
    let cfg = a.decoder.decoder(a.seed)?;
    let lvlm = match a.gamma {
        Some(g) => testbed.lvlm_with_gamma(g)?,
        None => testbed.lvlm()?,
    };
    let lx = testbed.lexicon();
    let image = load_image(testbed, &a.image)?;
    let y = testbed.featurize(&image)?;
    let prompt = lx.tokenize(&a.prompt)?;
    let aug = if a.regular { None } else { Some(augment(testbed, &image, &prompt, a.strategy.into(), a.seed)?.features) };
    let aug_view: Option<&Matrix> = aug.as_ref();
    let (text, traces) = if caption {
        let g = generate(&lvlm, &y, aug_view, &prompt, &cfg)?;
        (lx.detokenize(&g.tokens).join(" "), g.traces)
    } else {
        let tokens = AnswerTokens { yes: lx.yes(), no: lx.no() };
        let d = answer_presence(&lvlm, &y, aug_view, &prompt, &cfg, tokens)?;
        (d.answer.as_str().to_string(), vec![d.trace])
    };
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write(out.join("trace.jsonl"), traces_to_jsonl(&traces)?)?;
        write(out.join("output.txt"), format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

pub fn bench_config(a: &BenchArgs) -> Result<BenchConfig> {
    let kind: BenchmarkKind = a.kind.parse()?;
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    Ok(BenchConfig {
        gamma: a.gamma,
        strategy: a.strategy.into(),
        decoder: a.decoder.decoder(a.seed)?,
        ..BenchConfig::new(kind, a.n, a.seed)
    })
}

fn cmd_bench(testbed: &Testbed, a: &BenchArgs) -> Result<()> {
    let cfg = bench_config(a)?;
    let outcome = run_bench(testbed, &cfg)?;
    outcome.write_dir(&a.out)?;
    print!("{}", outcome.report().to_table());
    Ok(())
}
