use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ipay::checkpoint;
use ipay::config::Config;
use ipay::dataset::{Dataset, Split};
use ipay::model::IPayModel;
use ipay::rgb::RoiGeometry;
use ipay::synthgen::{generate_dataset, NoiseConfig, SynthConfig};
use ipay::trainer::{evaluate, make_batch, train};
use ipay::Tape;
use log::info;

#[derive(Parser)]
#[command(name = "ipay", version, about = "Payment-action recognition: synthetic data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (manifest, skeletons, frames).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class counts follow the deployment proportions instead of being balanced.
        #[arg(long, requires = "total")]
        table1_proportions: bool,
        #[arg(long)]
        total: Option<usize>,
        #[arg(long, value_enum, default_value_t = Noise::Moderate)]
        noise: Noise,
    },
    /// Train a model and write the checkpoint, epoch log and test report.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML file, or preset names joined by '+'.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Fail unless the checkpoint was trained with this model configuration.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Write the JSON report here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-frame hand-centric features and anchors as CSV.
    ExtractFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each sample's ST-ROI mosaic as PNG.
        #[arg(long)]
        dump_roi: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    None,
    Moderate,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad input (manifest, config, checkpoint), 3 for anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    use ipay::Error as E;
    let invalid = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<E>(),
            Some(
                E::Manifest(_)
                    | E::Config(_)
                    | E::FingerprintMismatch { .. }
                    | E::Checkpoint(_)
                    | E::LabelOutOfRange { .. }
                    | E::InvalidLayout(_)
                    | E::MissingRequiredJoint(_)
                    | E::DisconnectedGraph { .. }
                    | E::UnknownLayer(_)
                    | E::Json(_)
            )
        ) || c.downcast_ref::<Invalid>().is_some()
    });
    if invalid {
        2
    } else {
        3
    }
}

#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, per_class, seed, table1_proportions, total, noise } => {
            let mut cfg = match (table1_proportions, total) {
                (true, Some(n)) => SynthConfig::table1(n, seed),
                _ => SynthConfig::balanced(per_class, seed),
            };
            cfg.noise = match noise {
                Noise::None => NoiseConfig::NONE,
                Noise::Moderate => NoiseConfig::MODERATE,
            };
            let m = generate_dataset(&cfg, &out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.join("manifest.json").display());
        }
        Cmd::Train { data, config, out } => cmd_train(&data, &config, &out)?,
        Cmd::Eval { data, ckpt, config, split, out } => {
            let header = checkpoint::read_header(&ckpt)?;
            if let Some(spec) = config {
                let cfg = Config::resolve(&spec)?;
                let expected = IPayModel::<f32>::new(&cfg, &header.layout)?.fingerprint();
                if expected != header.fingerprint {
                    return Err(ipay::Error::FingerprintMismatch { expected, found: header.fingerprint }.into());
                }
            }
            let model = checkpoint::load::<f32>(&ckpt)?;
            let ds = Dataset::load(&data, RoiGeometry::from(&model.config.data.roi))?;
            let prepared = ds.prepare(&model, Some(model.rgb_stats))?;
            let split = if split == SplitArg::Train { Split::Train } else { Split::Test };
            let report = evaluate(&model, &prepared, split, model.config.train.batch_size)?;
            print!("{}", report.table());
            if let Some(g) = report.mean_gates() {
                println!("mean gates: G_S {:.3}  G_R {:.3}", g[0], g[1]);
            }
            match out {
                Some(p) => fs::write(&p, report.to_json()).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{}", report.to_json()),
            }
        }
        Cmd::ExtractFeatures { data, ckpt, out, dump_roi } => cmd_extract(&data, &ckpt, &out, dump_roi)?,
    }
    Ok(())
}

fn cmd_train(data: &Path, spec: &str, out: &Path) -> Result<()> {
    let mut cfg = Config::resolve(spec)?;
    if let Ok(s) = std::env::var("IPAY_SEED") {
        cfg.seed = s.parse().map_err(|_| Invalid(format!("IPAY_SEED `{s}` is not an integer")))?;
    }
    let ds = Dataset::load(data, RoiGeometry::from(&cfg.data.roi))?;
    let mut model = IPayModel::<f32>::new(&cfg, &ds.layout)?;
    let prepared = ds.prepare(&model, None)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    info!("training {} params on {} samples", model.params.num_scalars(), prepared.split(Split::Train).len());
    let logs = train(&mut model, &prepared, &cfg.train, |_, _| {})?;
    let mut lines = String::new();
    for l in &logs {
        writeln!(lines, "{}", serde_json::to_string(l)?)?;
    }
    fs::write(out.join("train_log.jsonl"), lines)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    let report = evaluate(&model, &prepared, Split::Test, cfg.train.batch_size)?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.txt"), report.table())?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_extract(data: &Path, ckpt: &Path, out: &Path, dump_roi: bool) -> Result<()> {
    let model = checkpoint::load::<f64>(ckpt)?;
    let Some(sdd) = model.sdd.as_ref() else {
        bail!(Invalid("checkpoint has no sdd stream".into()));
    };
    let ds = Dataset::load(data, RoiGeometry::from(&model.config.data.roi))?;
    let prepared = ds.prepare(&model, Some(model.rgb_stats))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = String::from("id");
    for hand in ["l", "r"] {
        for name in ["dx", "dy", "dz", "vx", "vy", "vz", "r"] {
            write!(csv, ",{hand}_{name}")?;
        }
    }
    csv.push_str(",anchor_l_x,anchor_l_y,anchor_l_z,anchor_r_x,anchor_r_y,anchor_r_z\n");
    let samples: Vec<_> = prepared.samples.iter().collect();
    for chunk in samples.chunks(model.config.train.batch_size.max(1)) {
        let batch = make_batch(chunk, model.needs_rgb(), None, 1)?;
        let mut tape = Tape::new(&model.params);
        let o = model.forward(&mut tape, &batch)?.sdd.expect("sdd output");
        let f = tape.value(o.features);
        let t = f.shape()[2];
        for (b, s) in chunk.iter().enumerate() {
            let a = sdd.anchor_pair(&tape, &o, b);
            for ti in 0..t {
                csv.push_str(&s.id);
                for ch in 0..14 {
                    write!(csv, ",{}", f.at(&[b, ch, ti, 0]))?;
                }
                for v in a.left.iter().chain(&a.right) {
                    write!(csv, ",{v}")?;
                }
                csv.push('\n');
            }
        }
    }
    fs::write(out.join("features.csv"), csv)?;
    if dump_roi {
        let dir = out.join("roi");
        fs::create_dir_all(&dir)?;
        for c in &ds.clips {
            c.roi.to_frame().save_png(&dir.join(format!("{}.png", c.id)))?;
        }
    }
    println!("wrote features for {} samples to {}", samples.len(), out.display());
    Ok(())
}
