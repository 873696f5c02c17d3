use std::path::PathBuf;
use std::process::ExitCode;

use ahnet::data::Volume;
use ahnet::experiment::{run_all, Model, Run};
use ahnet::nets::{NetConfig, Preset};
use ahnet::transfer::{random_pair, validate_slice_equivalence};
use ahnet::{report, ExperimentConfig, Tensor};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "ahnet", version, about = "Train a 2D network on slices, transfer its encoder to 3D, evaluate both")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train and test volumes.
    Synth,
    /// Stage 1: train the 2D network on slice triples.
    Train2d,
    /// Transfer the stage-1 encoder to 3D and check slice equivalence.
    Transfer,
    /// Stage 2: train the hybrid 3D decoder on the locked encoder.
    Train3d,
    /// Response map of one volume, written as an AVOL file.
    Infer {
        #[arg(long, default_value = "ahnet")]
        model: Model,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// FROC of one or both trained models on the test split.
    EvalFroc {
        #[arg(long)]
        model: Option<Model>,
    },
    /// Dice of segmentation models on the test split.
    EvalDice {
        #[arg(long)]
        model: Option<Model>,
    },
    /// Time slice-wise 2D against single-pass 3D inference.
    Bench,
    /// Slice-equivalence check on randomly initialized encoder pairs.
    CheckEquivalence {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Volume depth in slices.
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Tables and plots from the run directory's CSVs.
    Report,
    /// synth, train2d, transfer, train3d, eval-froc and report in one go.
    RunAll,
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.preset {
        cfg.preset = p;
    }
    Ok(cfg)
}

fn models(m: Option<Model>) -> Vec<Model> {
    m.map_or_else(|| vec![Model::Ahnet, Model::Mcgcn], |m| vec![m])
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    let out = cli.common.out.clone();
    match cli.cmd {
        Cmd::RunAll => {
            let s = run_all(&out, cfg)?;
            report::report(&out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Report => {
            for p in report::report(&out)?.written {
                println!("{}", p.display());
            }
        }
        Cmd::CheckEquivalence {
            trials,
            depth,
            tolerance,
        } => {
            let net = NetConfig::preset(cfg.preset);
            let [x, y, _] = net.patch;
            let mut worst = 0.0f64;
            for t in 0..trials {
                let seed = cfg.seed.wrapping_add(t as u64);
                let (g2, g3) = random_pair(&net, seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = Tensor::uniform(&[1, 1, x, y, depth], -1.0, 1.0, &mut rng);
                let res = validate_slice_equivalence(&g2, &g3, &v, tolerance)?;
                let m = res.iter().map(|r| r.relative).fold(0.0, f64::max);
                println!("trial {t}: {} layers, max relative residual {m:.3e}", res.len());
                worst = worst.max(m);
            }
            println!("all {trials} trials within {tolerance:e} (worst {worst:.3e})");
        }
        cmd => {
            let run = Run::create(&out, cfg)?;
            match cmd {
                Cmd::Synth => run.synth()?,
                Cmd::Train2d => {
                    run.train2d()?;
                }
                Cmd::Transfer => run.transfer()?,
                Cmd::Train3d => {
                    run.train3d()?;
                }
                Cmd::Infer { model, volume, output } => {
                    let v = Volume::load(&volume)?.normalized(run.cfg.train.clamp);
                    let g = run.load_model(model)?;
                    let r = run.respond(&g, model, &v.voxels)?;
                    Volume::new(r, v.spacing, None)?.save(&output)?;
                }
                Cmd::EvalFroc { model } => {
                    for m in models(model) {
                        let e = run.eval_froc(m)?;
                        let row: Vec<String> = e.grid.iter().map(|p| format!("{:.3}", p.tpr)).collect();
                        println!("{}: TPR {} at FP/vol {:?}", m.tag(), row.join(" "), run.cfg.eval.fp_grid);
                    }
                }
                Cmd::EvalDice { model } => {
                    for m in models(model) {
                        let d = run.eval_dice(m)?;
                        println!("{}: Dice global {:.4}, per case {:.4}", m.tag(), d.global, d.per_case);
                    }
                }
                Cmd::Bench => {
                    let r = run.bench()?;
                    print!("{}", r.to_csv());
                    if r.ratio <= 1.0 {
                        bail!("hybrid 3D inference was not faster (ratio {:.3})", r.ratio);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
