//! The run directory and the pipeline steps that fill it. Every step reads
//! its inputs from the directory, so the CLI can run them one at a time.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{benchmark_inference, BenchReport};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{synth_dataset, Dataset, Task};
use crate::error::{Error, Result};
use crate::eval::dice::write_dice_csv;
use crate::eval::froc::{sample_sweep, write_froc_csv, write_sweep_csv};
use crate::eval::{dice_global, dice_per_case, extract_maxima, froc_sweep, Finding, FrocPoint, NmsConfig};
use crate::infer::{infer_slices, infer_volume};
use crate::nets::ahnet::build_ahnet;
use crate::nets::mcgcn::build_mcgcn;
use crate::nets::ModelGraph;
use crate::tensor::Tensor;
use crate::train::{train_stage1, train_stage2, TrainLog};
use crate::transfer::{auto_rules, transfer_encoder, validate_slice_equivalence};

pub const CONFIG: &str = "config.toml";
pub const TRAIN_DIR: &str = "data/train";
pub const TEST_DIR: &str = "data/test";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const TRANSFERRED_CKPT: &str = "transferred_encoder.ckpt";
pub const TRANSFER_REPORT: &str = "transfer_report.json";
pub const LOSS_STAGE1: &str = "loss_stage1.csv";
pub const LOSS_STAGE2: &str = "loss_stage2.csv";
pub const SUMMARY: &str = "summary.json";
pub const RUN_LOG: &str = "run.log";
pub const BENCH_CSV: &str = "bench.csv";
pub const DICE_CSV: &str = "dice.csv";

/// Which trained network a step refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Mcgcn,
    Ahnet,
}

impl Model {
    pub fn tag(self) -> &'static str {
        match self {
            Model::Mcgcn => "mcgcn",
            Model::Ahnet => "ahnet",
        }
    }
}

impl std::str::FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcgcn" => Ok(Model::Mcgcn),
            "ahnet" => Ok(Model::Ahnet),
            _ => Err(Error::Config(format!("unknown model `{s}` (mcgcn or ahnet)"))),
        }
    }
}

pub fn froc_csv(m: Model) -> String {
    format!("froc_{}.csv", m.tag())
}

pub fn sweep_csv(m: Model) -> String {
    format!("sweep_{}.csv", m.tag())
}

/// A run directory bound to its configuration.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
}

impl Run {
    /// Resolves the configuration and records it as `config.toml`.
    pub fn create(dir: impl Into<PathBuf>, cfg: ExperimentConfig) -> Result<Self> {
        let dir = dir.into();
        let cfg = cfg.resolved()?;
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(CONFIG), cfg.to_toml()?)?;
        Ok(Run { dir, cfg })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| !self.path(n).exists())
            .map(|n| self.path(n).display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArtifacts(missing))
        }
    }

    /// Appends a line to `run.log`; timings live here, never in the CSVs.
    pub fn note(&self, msg: &str) -> Result<()> {
        log::info!("{msg}");
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(RUN_LOG))?;
        writeln!(f, "{msg}")?;
        Ok(())
    }

    fn load_split(&self, split: &str) -> Result<Arc<Dataset>> {
        self.require(&[split])?;
        Ok(Arc::new(Dataset::load(self.path(split))?.normalized(self.cfg.train.clamp)))
    }

    pub fn train_data(&self) -> Result<Arc<Dataset>> {
        self.load_split(TRAIN_DIR)
    }

    pub fn test_data(&self) -> Result<Arc<Dataset>> {
        self.load_split(TEST_DIR)
    }

    /// Generates the training and test splits from disjoint generator streams.
    pub fn synth(&self) -> Result<()> {
        let c = &self.cfg;
        synth_dataset(&c.synth, 0, c.n_train)?.save(self.path(TRAIN_DIR))?;
        synth_dataset(&c.synth, c.n_train, c.n_test)?.save(self.path(TEST_DIR))?;
        self.note(&format!("synth: {} train, {} test volumes", c.n_train, c.n_test))
    }

    pub fn train2d(&self) -> Result<TrainLog> {
        let t = Instant::now();
        let s = train_stage1(self.train_data()?, &self.cfg.network(), &self.cfg.train)?;
        Checkpoint::from_store(&s.graph.params).save(self.path(STAGE1_CKPT))?;
        s.log.write_csv(BufWriter::new(File::create(self.path(LOSS_STAGE1))?))?;
        for e in &s.log.events {
            self.note(e)?;
        }
        self.note(&format!("train2d: {:.1} s", t.elapsed().as_secs_f64()))?;
        Ok(s.log)
    }

    /// Transfers the stage-1 encoder on its own and checks slice equivalence
    /// on the first test volume with z-pooling disabled.
    pub fn transfer(&self) -> Result<()> {
        let g2 = self.load_model(Model::Mcgcn)?;
        let ckpt = Checkpoint::load(self.path(STAGE1_CKPT))?;
        let (ck3, mut report) = transfer_encoder(&ckpt, &auto_rules(&g2))?;
        ck3.save(self.path(TRANSFERRED_CKPT))?;
        let test = self.test_data()?;
        let mut net = self.cfg.network();
        net.z_pooling = crate::nets::ZPooling::disabled(net.stages());
        let (g3, _) = build_ahnet(&net, self.cfg.seed, Some(&ck3))?;
        report.residuals = validate_slice_equivalence(&g2, &g3, &test.volumes[0].as_input(), 1e-5)?;
        fs::write(self.path(TRANSFER_REPORT), report.to_json()?)?;
        self.note(&format!(
            "transfer: {} tensors, max relative slice residual {:.3e}",
            ck3.len(),
            report.max_relative()
        ))
    }

    pub fn train3d(&self) -> Result<TrainLog> {
        self.require(&[STAGE1_CKPT])?;
        let t = Instant::now();
        let ckpt = Checkpoint::load(self.path(STAGE1_CKPT))?;
        let s = train_stage2(self.train_data()?, &ckpt, &self.cfg.network(), &self.cfg.train)?;
        Checkpoint::from_store(&s.graph.params).save(self.path(STAGE2_CKPT))?;
        s.log.write_csv(BufWriter::new(File::create(self.path(LOSS_STAGE2))?))?;
        if !self.path(TRANSFER_REPORT).exists() {
            fs::write(self.path(TRANSFER_REPORT), s.transfer.to_json()?)?;
        }
        for e in &s.log.events {
            self.note(e)?;
        }
        self.note(&format!("train3d: {:.1} s", t.elapsed().as_secs_f64()))?;
        Ok(s.log)
    }

    /// Rebuilds a trained network from its checkpoint.
    pub fn load_model(&self, m: Model) -> Result<ModelGraph> {
        let net = self.cfg.network();
        let (mut g, file) = match m {
            Model::Mcgcn => (build_mcgcn(&net, 0)?, STAGE1_CKPT),
            Model::Ahnet => (build_ahnet(&net, 0, None)?.0, STAGE2_CKPT),
        };
        self.require(&[file])?;
        Checkpoint::load(self.path(file))?.load_into(&mut g.params)?;
        Ok(g)
    }

    /// Whole-volume response of a model: slice-wise for the 2D network,
    /// tiled for the hybrid one.
    pub fn respond(&self, g: &ModelGraph, m: Model, voxels: &Tensor) -> Result<Tensor> {
        match m {
            Model::Mcgcn => infer_slices(g, voxels, self.cfg.eval.slice_chunk),
            Model::Ahnet => infer_volume(g, voxels, &self.cfg.eval.tiling),
        }
    }

    /// Responses of a model on every test volume.
    pub fn test_responses(&self, m: Model) -> Result<(Arc<Dataset>, Vec<Tensor>)> {
        let g = self.load_model(m)?;
        let test = self.test_data()?;
        let r = test
            .volumes
            .iter()
            .map(|v| self.respond(&g, m, &v.voxels))
            .collect::<Result<Vec<_>>>()?;
        Ok((test, r))
    }

    /// Detection FROC of one model on the test split; writes the grid and
    /// full-sweep CSVs and returns the grid points.
    pub fn eval_froc(&self, m: Model) -> Result<FrocEval> {
        let t = Instant::now();
        let (test, responses) = self.test_responses(m)?;
        let nms = NmsConfig {
            threshold: self.cfg.eval.threshold,
            radius: self.cfg.eval.nms_radius,
        };
        let findings = responses
            .iter()
            .map(|r| extract_maxima(r, &nms))
            .collect::<Result<Vec<Vec<Finding>>>>()?;
        let sweep = froc_sweep(&findings, &test.boxes)?;
        let grid = sample_sweep(&sweep, &self.cfg.eval.fp_grid);
        write_froc_csv(BufWriter::new(File::create(self.path(&froc_csv(m)))?), &grid)?;
        write_sweep_csv(BufWriter::new(File::create(self.path(&sweep_csv(m)))?), &sweep)?;
        let at_one = sample_sweep(&sweep, &[1.0])[0].tpr;
        self.note(&format!(
            "eval-froc {}: TPR {at_one:.3} at 1 FP/volume, {:.1} s",
            m.tag(),
            t.elapsed().as_secs_f64()
        ))?;
        Ok(FrocEval {
            grid,
            tpr_at_1fp: at_one,
        })
    }

    /// Global and per-case Dice of thresholded segmentation scores.
    pub fn eval_dice(&self, m: Model) -> Result<DiceEval> {
        if self.cfg.train.task != Task::Segmentation {
            return Err(Error::Config("eval-dice needs task = \"segmentation\"".into()));
        }
        let (test, responses) = self.test_responses(m)?;
        let p = self.cfg.eval.mask_threshold as f64;
        let cut = (p / (1.0 - p)).ln() as f32;
        let pred: Vec<Vec<u8>> = responses
            .iter()
            .map(|r| r.data().iter().map(|&s| (s > cut) as u8).collect())
            .collect();
        let truth = test
            .volumes
            .iter()
            .zip(&test.names)
            .map(|(v, n)| v.mask.clone().ok_or_else(|| Error::Data(format!("`{n}` has no mask"))))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&[u8], &[u8])> = pred.iter().zip(&truth).map(|(a, b)| (&a[..], &b[..])).collect();
        let ids: Vec<String> = test.names.iter().map(|n| format!("{}:{n}", m.tag())).collect();
        let path = self.path(&format!("dice_{}.csv", m.tag()));
        write_dice_csv(BufWriter::new(File::create(path)?), &ids, &pairs)?;
        Ok(DiceEval {
            global: dice_global(&pairs)?,
            per_case: dice_per_case(&pairs)?,
        })
    }

    pub fn bench(&self) -> Result<BenchReport> {
        let g2 = self.load_model(Model::Mcgcn)?;
        let g3 = self.load_model(Model::Ahnet)?;
        let b = &self.cfg.bench;
        let r = benchmark_inference(&g2, &g3, self.cfg.preset, b.dims, b.repeats, self.cfg.eval.slice_chunk)?;
        fs::write(self.path(BENCH_CSV), r.to_csv())?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocEval {
    pub grid: Vec<FrocPoint>,
    pub tpr_at_1fp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceEval {
    pub global: f64,
    pub per_case: f64,
}

/// Outcome of the end-to-end detection experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub test_lesions: usize,
    pub ahnet: FrocEval,
    pub mcgcn: FrocEval,
    /// Mean base loss over the first and last 50 logged steps per stage.
    pub loss_stage1: Option<(f64, f64)>,
    pub loss_stage2: Option<(f64, f64)>,
}

impl Summary {
    pub fn tpr_at(points: &[FrocPoint], fp: f64) -> Option<f64> {
        points.iter().find(|p| p.fp_per_volume == fp).map(|p| p.tpr)
    }
}

/// synth → stage 1 → transfer → stage 2 → FROC of both models.
pub fn run_all(dir: impl AsRef<Path>, cfg: ExperimentConfig) -> Result<Summary> {
    let run = Run::create(dir.as_ref(), cfg)?;
    let _ = fs::remove_file(run.path(RUN_LOG));
    let t = Instant::now();
    run.synth()?;
    let l1 = run.train2d()?;
    run.transfer()?;
    let l2 = run.train3d()?;
    let ahnet = run.eval_froc(Model::Ahnet)?;
    let mcgcn = run.eval_froc(Model::Mcgcn)?;
    let s = Summary {
        seed: run.cfg.seed,
        n_train: run.cfg.n_train,
        n_test: run.cfg.n_test,
        test_lesions: run.test_data()?.lesion_count(),
        ahnet,
        mcgcn,
        loss_stage1: l1.reduction("stage1", 50),
        loss_stage2: l2.reduction("stage2", 50),
    };
    fs::write(
        run.path(SUMMARY),
        serde_json::to_string_pretty(&s)? + "\n",
    )?;
    run.note(&format!("run-all: {:.1} s", t.elapsed().as_secs_f64()))?;
    Ok(s)
}
