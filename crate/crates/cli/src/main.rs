use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctxc::codec::{decode_sequence, encode_sequence, ModelState};
use ctxc::entropy::Bitstream;
use ctxc::eval::ablation::{parse_grid, run_ablation, AblationSettings, EvalConfig};
use ctxc::eval::protocol::{frame_records, held_out_sequences, write_frame_csv, RateTotals};
use ctxc::eval::rawvideo::{load_raw_video, sidecar_path, write_raw_video};
use ctxc::eval::synthetic::{generate, Generator, SequenceSpec};
use ctxc::tensor::Tensor;
use ctxc::training::{load_checkpoint, save_checkpoint, TrainConfig};
use ctxc::{Error, Result};

#[derive(Parser)]
#[command(name = "ctxc", version, about = "Toy conditional learned video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        /// TOML training configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode a raw RGB8 video into a container.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<input>.meta`.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// `0..3`, or `interp=<f>` for a fractional rate index.
        #[arg(long, default_value = "0")]
        lambda_index: String,
        #[arg(long, default_value_t = 32, allow_hyphen_values = true)]
        intra_period: i32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a container into a raw RGB8 video and sidecar.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate-distortion and per-frame CSVs for one checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Raw video to test on; held-out synthetic sequences otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Comma list of output files; `rd*` gets the curve, `frames*` the
        /// per-frame rows.
        #[arg(long, value_delimiter = ',', default_value = "rd.csv,frames.csv")]
        emit: Vec<PathBuf>,
        #[arg(long, default_value_t = 32, allow_hyphen_values = true)]
        intra_period: i32,
        /// Rate index of the per-frame rows.
        #[arg(long, default_value = "0")]
        lambda_index: String,
    },
    /// Train and compare rows of the ablation grid.
    Ablate {
        #[arg(long, default_value = "m1..m8")]
        grid: String,
        /// Number of seeds, run as 1..=k.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Base training configuration; row flags override its switches.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint cache directory.
        #[arg(long, default_value = "target/ctxc-cache")]
        cache: PathBuf,
        /// Directory receiving `curves.csv` and `summary.csv`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a synthetic test sequence.
    Gen {
        #[arg(long, default_value = "translate")]
        generator: Generator,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 96)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_rate(s: &str) -> Result<f32> {
    let bad = || Error::Contract(format!("--lambda-index {s:?}: expected 0..3 or interp=<f>"));
    let v = match s.strip_prefix("interp=") {
        Some(v) => v.parse::<f32>().map_err(|_| bad())?,
        None => s.parse::<u8>().map_err(|_| bad())? as f32,
    };
    if !(0.0..=3.0).contains(&v) {
        return Err(Error::Contract(format!("rate index {v} outside [0, 3]")));
    }
    Ok(v)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<ModelState> {
    Ok(load_checkpoint(path)?.0)
}

fn load_frames(input: &Path, sidecar: Option<&Path>) -> Result<Vec<Tensor<f32>>> {
    let side = sidecar.map_or_else(|| sidecar_path(input), Path::to_path_buf);
    Ok(load_raw_video(input, &side)?.0)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Train { config, seed, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let mut log_file = log.as_deref().map(create).transpose()?;
            let (trainer, logs) = cfg.train(seed, log_file.as_mut().map(|f| f as &mut dyn Write))?;
            save_checkpoint(&out, &trainer.model, Some(&trainer.opt))?;
            let skipped: usize = logs.iter().map(|l| l.skipped).sum();
            writeln!(stdout, "stages,epochs,skipped_updates,final_loss")?;
            let last = logs.last().map_or(f64::NAN, |l| l.mean_loss);
            let stages = logs.iter().map(|l| l.stage).max().map_or(0, |s| s + 1);
            writeln!(stdout, "{stages},{},{skipped},{last:.6}", logs.len())?;
        }
        Command::Encode {
            ckpt,
            input,
            sidecar,
            lambda_index,
            intra_period,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let frames = load_frames(&input, sidecar.as_deref())?;
            let enc = encode_sequence(&model, &frames, parse_rate(&lambda_index)?, intra_period)?;
            let bytes = enc.bitstream.serialize();
            std::fs::write(&out, &bytes)?;
            let hdr = enc.bitstream.header;
            let pixels = hdr.width as f64 * hdr.height as f64 * frames.len() as f64;
            writeln!(stdout, "frames,bytes,bpp,clamped")?;
            writeln!(
                stdout,
                "{},{},{:.6},{}",
                frames.len(),
                bytes.len(),
                bytes.len() as f64 * 8.0 / pixels,
                enc.stats.clamped
            )?;
        }
        Command::Decode { ckpt, input, out } => {
            let model = load_model(&ckpt)?;
            let bitstream = Bitstream::deserialize(&std::fs::read(&input)?)?;
            let frames = decode_sequence(&model, &bitstream)?;
            let meta = write_raw_video(&out, &frames, 30.0)?;
            writeln!(stdout, "frames,width,height")?;
            writeln!(stdout, "{},{},{}", meta.frames, meta.width, meta.height)?;
        }
        Command::Eval {
            ckpt,
            input,
            sidecar,
            emit,
            intra_period,
            lambda_index,
        } => {
            let model = load_model(&ckpt)?;
            let eval = EvalConfig::default();
            let sequences = match &input {
                Some(p) => vec![load_frames(p, sidecar.as_deref())?],
                None => held_out_sequences(&eval.spec(), eval.sequences, eval.seed)?,
            };
            for path in &emit {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let mut w = create(path)?;
                if name.starts_with("rd") {
                    writeln!(w, "rate,bpp,psnr,stream_bpp")?;
                    for &rate in &eval.rates {
                        let mut totals = RateTotals::default();
                        for seq in &sequences {
                            let (enc, records) = frame_records(&model, seq, rate, intra_period)?;
                            totals.add(&enc, &records);
                        }
                        let p = totals.inter_point("");
                        writeln!(w, "{rate},{:.6},{:.4},{:.6}", p.bpp, p.quality, totals.stream_bpp())?;
                    }
                } else if name.starts_with("frames") {
                    let (_, records) = frame_records(&model, &sequences[0], parse_rate(&lambda_index)?, intra_period)?;
                    write_frame_csv(&records, &mut w)?;
                } else {
                    return Err(Error::Contract(format!(
                        "unknown output {name:?}; expected rd*.csv or frames*.csv"
                    )));
                }
                w.flush()?;
            }
        }
        Command::Ablate {
            grid,
            seeds,
            config,
            cache,
            out,
        } => {
            let rows = parse_grid(&grid)?;
            if seeds == 0 {
                return Err(Error::Contract("need at least one seed".into()));
            }
            let settings = AblationSettings {
                train: load_config(config.as_deref())?,
                eval: EvalConfig::default(),
                cache: Some(cache),
            };
            let seed_list: Vec<u64> = (1..=seeds).collect();
            let table = run_ablation(&rows, &seed_list, &settings, &mut |msg| eprintln!("{msg}"))?;
            std::fs::create_dir_all(&out)?;
            let mut curves = create(&out.join("curves.csv"))?;
            table.write_curves(&mut curves)?;
            curves.flush()?;
            let mut summary = create(&out.join("summary.csv"))?;
            table.write_summary(&mut summary)?;
            summary.flush()?;
            table.write_summary(stdout)?;
        }
        Command::Gen {
            generator,
            seed,
            width,
            height,
            frames,
            out,
        } => {
            let spec = SequenceSpec::new(width, height, frames);
            let seq = generate(&spec, generator, seed)?;
            let meta = write_raw_video(&out, &seq, 30.0)?;
            writeln!(stdout, "frames,width,height")?;
            writeln!(stdout, "{},{},{}", meta.frames, meta.width, meta.height)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format(_) | Error::Decode(_) | Error::Io(_) => 2,
        Error::Contract(_) | Error::Dimension(_) | Error::Range { .. } => 3,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ctxc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
