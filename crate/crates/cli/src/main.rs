use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qeno::config::RunConfig;
use qeno::data::{self, CloudVolumeSeries, GeneratorConfig};
use qeno::metrics::{coherence_matrix, MetricReport};
use qeno::pipeline::eval::{hidden_features, model_report, persistence_report, summary_table};
use qeno::pipeline::train::{samples_of, split_sequences};
use qeno::pipeline::{load_model, save_model, train, Ablation, CheckpointMeta, Model};
use qeno::{Error, Tensor};

#[derive(Parser)]
#[command(name = "qeno", version, about = "Hybrid quantum-classical 3D cloud nowcasting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic plume dataset as CVT files.
    Gen {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        sequences: usize,
        /// Frames x levels x rows x cols.
        #[arg(long, default_value = "12x8x32x32")]
        dims: String,
    },
    /// Train a model and write checkpoint, history and parameter report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// none | no-qemid | no-qedecoder | no-both | all
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue training from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast the frames following each series.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "forecasts")]
        out: PathBuf,
    },
    /// Score checkpoints and the persistence baseline.
    Eval {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write forecast images or the hidden-feature coherence matrix.
    Export {
        #[arg(long, value_enum)]
        what: ExportWhat,
        #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
        format: ExportFormat,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "export")]
        out: PathBuf,
        /// Window index for forecast export.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    All,
    Val,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportWhat {
    Forecast,
    Coherence,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Csv,
    Pgm,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::ElementCount { .. } => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen {
            out,
            seed,
            sequences,
            dims,
        } => cmd_gen(&out, seed, sequences, &dims),
        Cmd::Train {
            config,
            ablation,
            data,
            checkpoint,
            reports,
            epochs,
            resume,
        } => cmd_train(TrainArgs {
            config,
            ablation,
            data,
            checkpoint,
            reports,
            epochs,
            resume,
        }),
        Cmd::Predict { checkpoint, data, out } => cmd_predict(&checkpoint, &data, &out),
        Cmd::Eval {
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(&checkpoint, &data, split, out.as_deref()),
        Cmd::Export {
            what,
            format,
            checkpoint,
            data,
            out,
            sample,
        } => cmd_export(what, format, &checkpoint, &data, &out, sample),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Result<T> = qeno::Result<T>;

fn cmd_gen(out: &Path, seed: u64, sequences: usize, dims: &str) -> Result<()> {
    let dims = data::parse_dims(dims)?;
    if sequences == 0 {
        return Err(Error::Config("--sequences must be at least 1".into()));
    }
    let series = data::generate(sequences, dims, seed, &GeneratorConfig::default())?;
    let paths = data::write_dataset(&series, out)?;
    eprintln!("wrote {} sequences to {}", paths.len(), out.display());
    Ok(())
}

struct TrainArgs {
    config: Option<PathBuf>,
    ablation: Option<String>,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    reports: Option<PathBuf>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
}

fn load_data(path: &Path) -> Result<Vec<CloudVolumeSeries>> {
    data::read_dataset(path)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn model_name(a: Ablation) -> String {
    match a {
        Ablation::None => "qeno".to_string(),
        other => format!("qeno-{other}"),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{suffix}.{ext}"),
        None => format!("{stem}-{suffix}"),
    };
    path.with_file_name(name)
}

fn fit_grid(cfg: &mut RunConfig, series: &[CloudVolumeSeries]) -> Result<()> {
    let [_, c, h, w] = series[0].dims();
    let explicit: Vec<bool> = ["channels", "height", "width"].iter().map(|k| cfg.is_set(k)).collect();
    let m = &mut cfg.model;
    for ((key, have, slot), set) in [
        ("channels", c, &mut m.channels),
        ("height", h, &mut m.height),
        ("width", w, &mut m.width),
    ]
    .into_iter()
    .zip(explicit)
    {
        if set && *slot != have {
            return Err(Error::Config(format!(
                "config sets {key} = {slot} but the data has {have}"
            )));
        }
        *slot = have;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.data {
        cfg.data = d;
    }
    if let Some(c) = args.checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(r) = args.reports {
        cfg.reports = r;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.train.validate()?;
    }
    let variants: Vec<Ablation> = match args.ablation.as_deref() {
        Some("all") => Ablation::ALL.to_vec(),
        Some(a) => vec![a.parse()?],
        None => vec![cfg.model.ablation],
    };
    if args.resume.is_some() && variants.len() > 1 {
        return Err(Error::Config("--resume works on a single variant".into()));
    }
    let series = load_data(&cfg.data)?;
    fit_grid(&mut cfg, &series)?;
    fs::create_dir_all(&cfg.reports)?;
    let mut reports = Vec::new();
    for &ablation in &variants {
        let (mut model, first_epoch) = match &args.resume {
            Some(p) => {
                require_file(p, "checkpoint")?;
                let (m, meta) = load_model(p)?;
                if args.ablation.is_some() && m.config.ablation != ablation {
                    return Err(Error::Config(format!(
                        "checkpoint was trained with ablation {}, not {ablation}",
                        m.config.ablation
                    )));
                }
                m.config.validate()?;
                (m, meta.epoch + 1)
            }
            None => {
                let mut mc = cfg.model.clone();
                mc.ablation = ablation;
                (Model::<f64>::new(mc, cfg.train.seed)?, 1)
            }
        };
        let tag = model.config.ablation.to_string();
        let single = variants.len() == 1;
        eprintln!("[{tag}] trainable parameters: {}", model.param_count());
        let report = train(&mut model, &series, &cfg.train, first_epoch, &mut |r| {
            eprintln!(
                "[{tag}] epoch {:>4}  train {:.6e}  val {:.6e}",
                r.epoch, r.train_mse, r.val_mse
            );
        })?;
        let ckpt = if single {
            cfg.checkpoint.clone()
        } else {
            with_suffix(&cfg.checkpoint, &tag)
        };
        if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let last_epoch = report.history.records.last().map_or(first_epoch - 1, |r| r.epoch);
        save_model(
            &model,
            &CheckpointMeta {
                epoch: last_epoch,
                seed: cfg.train.seed,
                lr: cfg.train.lr,
                clip_norm: cfg.train.clip_norm,
                val_fraction: cfg.train.val_fraction,
            },
            &ckpt,
        )?;
        let hist_path = cfg.reports.join(format!("history-{tag}.csv"));
        let csv = report.history.to_csv();
        if args.resume.is_some() && hist_path.is_file() {
            let mut f = fs::OpenOptions::new().append(true).open(&hist_path)?;
            f.write_all(csv.split_once('\n').map_or("", |(_, rest)| rest).as_bytes())?;
        } else {
            fs::write(&hist_path, csv)?;
        }
        fs::write(
            cfg.reports.join(format!("params-{tag}.txt")),
            model.params.count_report(),
        )?;
        eprintln!("[{tag}] best epoch {} -> {}", report.best_epoch, ckpt.display());
        if !single {
            let (_, val_idx) = split_sequences(series.len(), cfg.train.val_fraction, cfg.train.seed);
            let idx = if val_idx.is_empty() {
                (0..series.len()).collect()
            } else {
                val_idx
            };
            let samples = samples_of(&series, &idx, model.config.t_in, model.config.t_out)?;
            reports.push(model_report(
                &mut model,
                &samples,
                cfg.train.batch,
                &model_name(ablation),
            )?);
        }
    }
    if !reports.is_empty() {
        let path = cfg.reports.join("ablation.csv");
        fs::write(&path, summary_table(&reports))?;
        eprintln!("ablation table -> {}", path.display());
    }
    Ok(())
}

fn load_checkpoint_model(path: &Path) -> Result<(Model<f64>, CheckpointMeta)> {
    require_file(path, "checkpoint")?;
    load_model(path)
}

fn cmd_predict(checkpoint: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let (mut model, _) = load_checkpoint_model(checkpoint)?;
    let series = load_data(data_path)?;
    fs::create_dir_all(out)?;
    let t_in = model.config.t_in;
    for (i, s) in series.iter().enumerate() {
        let [t, c, h, w] = s.dims();
        if t < t_in {
            return Err(Error::Data(format!(
                "series {i} has {t} frames, the model reads {t_in}"
            )));
        }
        let f = c * h * w;
        let x = Tensor::new(vec![1, t_in, c, h, w], s.values.data()[(t - t_in) * f..].to_vec())?;
        let y = model.predict(&x)?;
        let frames = y.reshaped(vec![model.config.t_out, c, h, w])?;
        let out_series = CloudVolumeSeries::new(frames.map(|v| v as f32 as f64))?;
        data::write_cvt(&out_series, &out.join(format!("forecast_{i:05}.cvt")))?;
    }
    eprintln!("wrote {} forecasts to {}", series.len(), out.display());
    Ok(())
}

fn cmd_eval(checkpoints: &[PathBuf], data_path: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    for ckpt in checkpoints {
        require_file(ckpt, "checkpoint")?;
    }
    let series = load_data(data_path)?;
    let mut reports = Vec::new();
    let mut persistence: Option<MetricReport> = None;
    for ckpt in checkpoints {
        let (mut model, meta) = load_checkpoint_model(ckpt)?;
        let idx: Vec<usize> = match split {
            Split::All => (0..series.len()).collect(),
            Split::Val => {
                let (_, v) = split_sequences(series.len(), meta.val_fraction, meta.seed);
                if v.is_empty() {
                    (0..series.len()).collect()
                } else {
                    v
                }
            }
        };
        let samples = samples_of(&series, &idx, model.config.t_in, model.config.t_out)?;
        let name = model_name(model.config.ablation);
        let r = model_report(&mut model, &samples, 8, &name)?;
        eprintln!("{name}: mse {}", r.mse);
        reports.push(r);
        if persistence.is_none() {
            persistence = Some(persistence_report(&samples, "persistence")?);
        }
    }
    reports.extend(persistence);
    let csv = MetricReport::to_csv(&reports);
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// 8-bit grey level of a value in `[0,1]`, rounding half up.
fn gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[f64]) -> Result<()> {
    let mut bytes = format!("P5 {w} {h} 255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| gray(v)));
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_export(
    what: ExportWhat,
    format: ExportFormat,
    checkpoint: &Path,
    data_path: &Path,
    out: &Path,
    sample: usize,
) -> Result<()> {
    let (mut model, _) = load_checkpoint_model(checkpoint)?;
    let series = load_data(data_path)?;
    let all: Vec<usize> = (0..series.len()).collect();
    let samples = samples_of(&series, &all, model.config.t_in, model.config.t_out)?;
    fs::create_dir_all(out)?;
    match what {
        ExportWhat::Forecast => {
            let s = samples
                .get(sample)
                .ok_or_else(|| Error::Config(format!("--sample {sample} out of range ({} windows)", samples.len())))?;
            let mut shape = vec![1];
            shape.extend_from_slice(s.input.shape());
            let y = model.predict(&s.input.reshaped(shape)?)?;
            let ys = y.shape().to_vec();
            let (t_out, c, h, w) = (ys[1], ys[2], ys[3], ys[4]);
            match format {
                ExportFormat::Pgm => {
                    for t in 0..t_out {
                        for l in 0..c {
                            let start = (t * c + l) * h * w;
                            write_pgm(
                                &out.join(format!("forecast_t{t}_l{l}.pgm")),
                                w,
                                h,
                                &y.data()[start..start + h * w],
                            )?;
                        }
                    }
                }
                ExportFormat::Csv => {
                    let mut s = String::from("frame,level,row,col,value\n");
                    for (i, v) in y.data().iter().enumerate() {
                        let (t, l, r, cc) = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
                        s.push_str(&format!("{t},{l},{r},{cc},{v}\n"));
                    }
                    fs::write(out.join("forecast.csv"), s)?;
                }
            }
        }
        ExportWhat::Coherence => {
            let feats = hidden_features(&mut model, &samples, 8)?;
            let m = coherence_matrix(&feats)?;
            let n = m.shape()[0];
            match format {
                ExportFormat::Csv => {
                    let mut s = String::new();
                    for i in 0..n {
                        let row: Vec<String> = (0..n).map(|j| m.at(&[i, j]).to_string()).collect();
                        s.push_str(&row.join(","));
                        s.push('\n');
                    }
                    fs::write(out.join("coherence.csv"), s)?;
                }
                ExportFormat::Pgm => {
                    let px: Vec<f64> = m.data().iter().map(|v| (v + 1.0) / 2.0).collect();
                    write_pgm(&out.join("coherence.pgm"), n, n, &px)?;
                }
            }
        }
    }
    eprintln!("exported to {}", out.display());
    Ok(())
}
