//! The `rfr` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::autograd::Tape;
use crate::checks;
use crate::config::RunConfig;
use crate::error::RfrError;
use crate::image_io::Image;
use crate::layers::NormMode;
use crate::metrics;
use crate::net::{Architecture, RfrNet};
use crate::oracle::OracleReport;
use crate::partial_conv::MaskMap;
use crate::rfr_module::MergeMode;
use crate::tensor::Tensor;
use crate::train::{history_csv, masked_image, SyntheticDataset, Trainer};
use crate::weights;

#[derive(Debug, Parser)]
#[command(name = "rfr", version, about = "Recurrent feature reasoning image inpainting")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "RFR_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub iter_num: Option<usize>,
    #[arg(long, global = true, value_parser = ["adaptive", "average", "last"])]
    pub merge_mode: Option<String>,
    #[arg(long, global = true)]
    pub no_attention: bool,
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=3))]
    pub depth: Option<u64>,
    /// Divide every channel width by this factor.
    #[arg(long, global = true)]
    pub channel_scale: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Weight file to load (inpaint) or start from (train).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill the holes of an image.
    Inpaint {
        /// PPM (or grayscale PGM) image.
        #[arg(long)]
        image: PathBuf,
        /// PGM mask; pixels >= 128 are known, darker pixels are holes.
        #[arg(long)]
        mask: PathBuf,
        /// Also write the mask and newly filled region of every recurrence.
        #[arg(long)]
        dump_recurrence: bool,
    },
    /// Train on generated images and masks; writes history.csv and weights.rfrw.
    Train,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// SSIM, PSNR and mean l1 between two images.
    Metrics { prediction: PathBuf, reference: PathBuf },
    /// Per-layer and total parameter counts.
    ParamCount,
    /// Run every oracle and gradient check.
    Selftest,
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::CheckFailed(m) => m,
        }
    }
}

impl From<RfrError> for CliError {
    fn from(e: RfrError) -> Self {
        let msg = e.to_string();
        match e {
            RfrError::Io { .. } | RfrError::Format(_) => CliError::Io(msg),
            RfrError::NonFinite(_) => CliError::CheckFailed(msg),
            RfrError::Config(_) | RfrError::Dimension(_) | RfrError::Contract(_) => CliError::Config(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Defaults, then the config file, then flags (the seed flag falls back to `RFR_SEED`).
pub fn resolve_config(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.iter_num {
        cfg.iter_num = v;
    }
    if let Some(v) = &args.merge_mode {
        cfg.merge_mode = v.parse::<MergeMode>()?;
    }
    if args.no_attention {
        cfg.attention = false;
    }
    if let Some(v) = args.depth {
        cfg.depth = v as usize;
    }
    if let Some(v) = args.channel_scale {
        cfg.channel_scale = v;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.weights {
        cfg.weights = Some(v.clone());
    }
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    eprintln!("# resolved configuration");
    eprintln!("{cfg}");
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::from(RfrError::io(path, e)))
}

fn build_net(cfg: &RunConfig) -> CliResult<RfrNet> {
    let arch = Architecture::new(cfg.net_config()?)?;
    Ok(match &cfg.weights {
        Some(p) => weights::load(p, arch)?,
        None => {
            let params = arch.init_params(cfg.seed)?;
            RfrNet { arch, params }
        }
    })
}

/// Grayscale images are replicated to three channels.
fn rgb_tensor(img: &Image) -> Tensor {
    let t = img.to_tensor();
    if img.channels == 3 {
        return t;
    }
    Tensor::from_vec([1, 3, img.height, img.width], t.data().repeat(3)).expect("sizes agree")
}

fn report(reports: &[OracleReport]) -> CliResult<()> {
    for r in reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn inpaint(cfg: &mut RunConfig, image: &Path, mask: &Path, dump: bool) -> CliResult<()> {
    let img = Image::read(image)?;
    let mask_img = Image::read(mask)?;
    if (img.width, img.height) != (mask_img.width, mask_img.height) {
        return Err(CliError::Config(format!(
            "image is {}x{} but mask is {}x{}",
            img.width, img.height, mask_img.width, mask_img.height
        )));
    }
    // the network accepts any side that is a multiple of its stride
    cfg.resolution = img.height;
    log_config(cfg);
    let net = build_net(cfg)?;
    net.arch.config.check_resolution(img.height, img.width)?;

    let x = rgb_tensor(&img);
    let m: MaskMap = mask_img.to_mask();
    let masked = masked_image(&x, &m)?;
    let tape = Tape::inference(cfg.precision);
    let out = net
        .arch
        .forward(&tape, &net.params, &tape.constant(masked), &m, NormMode::Eval)?;

    create_dir(&cfg.out)?;
    Image::from_tensor(out.prediction.value(), 0)?.write(cfg.out.join("reconstructed.ppm"))?;
    Image::from_tensor(out.composite.value(), 0)?.write(cfg.out.join("composite.ppm"))?;
    let mut written = 2;
    if dump {
        let dir = cfg.out.join("recurrence");
        create_dir(&dir)?;
        let state = &out.recurrence;
        for (i, (mask, region)) in state.masks.iter().zip(&state.regions).enumerate() {
            Image::from_mask(mask, 0)?.write(dir.join(format!("mask_{}.pgm", i + 1)))?;
            Image::from_mask(region, 0)?.write(dir.join(format!("region_{}.pgm", i + 1)))?;
            written += 2;
        }
    }
    println!("wrote {written} images to {}", cfg.out.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> CliResult<()> {
    log_config(cfg);
    let mut net = build_net(cfg)?;
    let data = SyntheticDataset::generate(cfg.images, cfg.resolution, cfg.band, cfg.seed)?;
    let mut trainer = Trainer::new(cfg.train_config()?)?;
    let result = trainer.train(&mut net, &data);
    create_dir(&cfg.out)?;
    let history = cfg.out.join("history.csv");
    fs::write(&history, history_csv(&trainer.history)).map_err(|e| CliError::from(RfrError::io(&history, e)))?;
    result?;
    weights::save(cfg.out.join("weights.rfrw"), &net.params)?;
    if let (Some(first), Some(last)) = (trainer.history.first(), trainer.history.last()) {
        println!(
            "{} steps: total loss {:.6} -> {:.6}",
            trainer.history.len(),
            first.total,
            last.total
        );
    }
    println!("wrote {} and weights.rfrw", history.display());
    Ok(())
}

fn print_metrics(pred: &Path, reference: &Path) -> CliResult<()> {
    let (a, b) = (Image::read(pred)?, Image::read(reference)?);
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(CliError::Config(format!(
            "images differ in size: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let m = metrics::metrics(&a.to_tensor(), &b.to_tensor())?;
    println!("ssim={:.4} psnr={:.4} mean_l1={:.6}", m.ssim, m.psnr, m.mean_l1);
    Ok(())
}

fn param_count(cfg: &RunConfig) -> CliResult<()> {
    log_config(cfg);
    let arch = Architecture::new(cfg.net_config()?)?;
    for row in arch.param_rows() {
        println!("{:<20} {:<12} {:>10}", row.name, row.kind, row.params);
    }
    println!("total {}", arch.param_count());
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Inpaint {
            image,
            mask,
            dump_recurrence,
        } => inpaint(&mut cfg, &image, &mask, dump_recurrence),
        Command::Train => train(&cfg),
        Command::Gradcheck => {
            log_config(&cfg);
            report(&checks::gradient_checks(cfg.seed)?)
        }
        Command::Metrics { prediction, reference } => print_metrics(&prediction, &reference),
        Command::ParamCount => param_count(&cfg),
        Command::Selftest => {
            log_config(&cfg);
            report(&checks::selftest(cfg.seed)?)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
