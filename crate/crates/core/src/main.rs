use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use superimage::harness::{
    all_layouts, emit_results, evaluate_cases, grid_sweep, load_cases, run_experiment_with,
    Dataset, ExperimentConfig, HarnessError, Mode, RunRecord,
};
use superimage::metrics::FoldResult;
use superimage::si_codec::{from_super_image, to_super_image, GridLayout, SuperImage, Volume};
use superimage::synthgen::{write_dataset, PhantomSpec};
use superimage::tinynet::{read_checkpoint, write_checkpoint};
use superimage::volume_store::{export_pgm, read_volume, write_volume};

#[derive(Parser)]
#[command(name = "superimage", version, about = "Super-image volumetric segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// PhantomSpec JSON; defaults to the built-in spec.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Volume file to super-image file.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        sh: usize,
        #[arg(long)]
        sw: usize,
    },
    /// Super-image file back to a volume file.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        sh: usize,
        #[arg(long)]
        sw: usize,
    },
    /// One channel of a super-image file as 8-bit PGM.
    Export {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        sh: usize,
        #[arg(long)]
        sw: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
    /// k-fold training and validation of one configuration.
    Train(TrainArgs),
    /// si2d runs over several grid layouts.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        /// `all` or a comma list such as `4x4,2x8`.
        #[arg(long, default_value = "all")]
        layouts: String,
    },
    /// Score a saved model on every case of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        grid: Option<GridLayout>,
        /// Write the scores as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// ExperimentConfig JSON; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    grid: Option<GridLayout>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::synthetic(self.mode.unwrap_or(Mode::Si2d), "results"),
        };
        if let Some(mode) = self.mode {
            if mode != cfg.mode {
                cfg.mode = mode;
                cfg.unet.dims = mode.dims();
            }
        }
        if let Some(m) = &self.manifest {
            cfg.dataset = Dataset::Manifest(m.clone());
        }
        if self.grid.is_some() {
            cfg.grid = self.grid;
        }
        macro_rules! set {
            ($field:ident, $flag:ident) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$field = v;
                }
            };
        }
        set!(folds, folds);
        set!(epochs, epochs);
        set!(batch_size, batch);
        set!(seed, seed);
        set!(output_dir, out);
        Ok(cfg)
    }
}

fn cfg_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

fn layout(sh: usize, sw: usize) -> Result<GridLayout, HarnessError> {
    GridLayout::new(sh, sw).map_err(cfg_err)
}

/// Super images are stored as one-slice volumes of extent `(H·sh, W·sw, 1)`.
fn read_si(path: &Path, g: GridLayout) -> Result<SuperImage, HarnessError> {
    let v = read_volume(path)?;
    let (h, w, d, c) = v.dims();
    if d != 1 || h % g.sh != 0 || w % g.sw != 0 {
        return Err(cfg_err(format!(
            "{} is {h}x{w}x{d}, not a super image for grid {g}",
            path.display()
        )));
    }
    let probe = Volume::filled(h / g.sh, w / g.sw, g.cells(), 1, 0.0)?;
    let provenance = to_super_image(&probe, g)?.provenance();
    Ok(SuperImage::new(c, v.into_data(), provenance)?)
}

fn write_si(si: &SuperImage, path: &Path) -> Result<(), HarnessError> {
    let v = Volume::new(
        si.height(),
        si.width(),
        1,
        si.channels(),
        [1.0; 3],
        si.data().to_vec(),
    )?;
    Ok(write_volume(&v, path)?)
}

fn report(records: &[RunRecord], dir: &Path) -> Result<(), HarnessError> {
    for line in emit_results(records, dir)? {
        println!("{line}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Gen {
            out,
            cases,
            seed,
            spec,
        } => {
            let mut spec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => PhantomSpec::default(),
            };
            spec.seed = seed;
            let manifest = write_dataset(&spec, cases, &out)?;
            println!("{}", manifest.display());
        }
        Command::Encode {
            input,
            output,
            sh,
            sw,
        } => {
            let si = to_super_image(&read_volume(input)?, layout(sh, sw)?)?;
            write_si(&si, &output)?;
        }
        Command::Decode {
            input,
            output,
            sh,
            sw,
        } => {
            let g = layout(sh, sw)?;
            let si = read_si(&input, g)?;
            let p = si.provenance();
            let v = from_super_image(&si, g, p.slice_height, p.slice_width)?;
            write_volume(&v, output)?;
        }
        Command::Export {
            input,
            output,
            sh,
            sw,
            channel,
        } => {
            let si = read_si(&input, layout(sh, sw)?)?;
            export_pgm(&si, channel, output)?;
        }
        Command::Train(args) => {
            let cfg = args.config()?;
            let dir = cfg.output_dir.clone();
            std::fs::create_dir_all(&dir)?;
            let record = run_experiment_with(&cfg, |fold, model| {
                write_checkpoint(model, dir.join(format!("fold{fold}.snet")))?;
                Ok(())
            })?;
            report(&[record], &dir)?;
        }
        Command::Sweep { train, layouts } => {
            let mut cfg = train.config()?;
            cfg.mode = Mode::Si2d;
            cfg.unet.dims = 2;
            let list = if layouts == "all" {
                let cases = load_cases(&cfg.dataset)?;
                all_layouts(cases[0].image.depth())
            } else {
                layouts
                    .split(',')
                    .map(|s| s.trim().parse::<GridLayout>().map_err(cfg_err))
                    .collect::<Result<_, _>>()?
            };
            let records = grid_sweep(&cfg, &list)?;
            report(&records, &cfg.output_dir)?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            mode,
            grid,
            out,
        } => {
            let model = read_checkpoint(checkpoint)?;
            let mut cfg = ExperimentConfig::synthetic(mode, "unused");
            cfg.dataset = Dataset::Manifest(manifest);
            cfg.unet = *model.config();
            if grid.is_some() {
                cfg.grid = grid;
            }
            cfg.validate()?;
            let cases = load_cases(&cfg.dataset)?;
            let idx: Vec<usize> = (0..cases.len()).collect();
            let result = FoldResult::new(0, evaluate_cases(&cfg, &model, &cases, &idx)?)?;
            let a = result.aggregate;
            println!(
                "{} cases: DSC {:.3} precision {:.3} recall {:.3}",
                result.cases.len(),
                a.dsc,
                a.precision,
                a.recall
            );
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&result)? + "\n")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
