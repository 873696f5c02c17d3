//! The two-stage protocol: the 2D network on slice triples, then the hybrid
//! network with the transferred encoder locked, then an optional joint phase.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{collate, AugmentConfig, Dataset, Layout, PatchSampler, PatchStream, SamplerConfig, Task};
use crate::error::{Error, Result};
use crate::nets::{build_ahnet, build_mcgcn, ModelGraph, Mode, NetConfig, Part};
use crate::objectives::{Adam, AdamConfig, FocalMode, FocalSpec, HeatmapSpec};
use crate::tensor::autograd::{Exec, LossSpec, Tape};
use crate::tensor::norm::{update_running, BN_MOMENTUM};
use crate::tensor::Tensor;
use crate::transfer::{auto_rules, transfer_encoder, TransferReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    /// 3D patch extents; 2D patches use the in-plane part.
    pub patch: [usize; 3],
    pub positive_fraction: f64,
    pub batch_2d: usize,
    pub batch_3d: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_joint: f64,
    pub adam: AdamConfig,
    pub focal: FocalSpec,
    pub focal_mode: FocalMode,
    /// Swap the base loss for its focal form once training plateaus.
    pub focal_switch: bool,
    /// Plateau: relative improvement of the epoch mean below
    /// `plateau_tolerance` across `plateau_window` epochs.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub steps_per_epoch: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Epochs of joint fine-tuning after the locked phase; 0 disables it.
    pub epochs_joint: usize,
    /// Heatmap peak value; pairs with `focal.d_max` so hard voxels have `D > 1`.
    pub target_scale: f32,
    pub heatmap: HeatmapSpec,
    pub augment: AugmentConfig,
    /// Intensity truncation before standardization, e.g. `[-125, 225]` for CT.
    pub clamp: Option<[f32; 2]>,
    pub class_weights: Option<Vec<f32>>,
    /// Keep encoder normalization statistics fixed while the encoder is locked.
    pub freeze_bn_when_locked: bool,
    pub queue_depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Detection,
            patch: [64, 64, 8],
            positive_fraction: 0.7,
            batch_2d: 8,
            batch_3d: 2,
            lr_stage1: 0.0005,
            lr_stage2: 0.001,
            lr_joint: 0.001,
            adam: AdamConfig::default(),
            focal: FocalSpec {
                gamma: 2.0,
                d_max: 100.0,
            },
            focal_mode: FocalMode::PerVoxel,
            focal_switch: true,
            plateau_window: 3,
            plateau_tolerance: 0.01,
            steps_per_epoch: 50,
            epochs_stage1: 40,
            epochs_stage2: 40,
            epochs_joint: 0,
            target_scale: 10.0,
            heatmap: HeatmapSpec::default(),
            augment: AugmentConfig::default(),
            clamp: None,
            class_weights: None,
            freeze_bn_when_locked: true,
            queue_depth: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!("positive_fraction {} outside [0, 1]", self.positive_fraction));
        }
        for (n, r) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2), ("lr_joint", self.lr_joint)] {
            if !(r > 0.0) {
                return bad(format!("{n} must be > 0, got {r}"));
            }
        }
        if self.batch_2d == 0 || self.batch_3d == 0 || self.steps_per_epoch == 0 {
            return bad("batch sizes and steps per epoch must be positive".into());
        }
        if self.patch.iter().any(|&p| p == 0) {
            return bad(format!("zero patch extent {:?}", self.patch));
        }
        if self.plateau_window == 0 {
            return bad("plateau_window must be positive".into());
        }
        if !(self.target_scale > 0.0) {
            return bad("target_scale must be > 0".into());
        }
        if !(self.heatmap.sigma_divisor > 0.0) {
            return bad("heatmap sigma divisor must be > 0".into());
        }
        self.adam.validate()?;
        self.focal.validate()
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            patch: self.patch,
            positive_fraction: self.positive_fraction,
            task: self.task,
            heatmap: self.heatmap,
            target_scale: self.target_scale,
            augment: self.augment,
        }
    }

    /// Output channels the task needs.
    pub fn out_channels(&self) -> usize {
        match self.task {
            Task::Detection => 1,
            Task::Segmentation => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub objective: String,
    pub loss: f64,
    /// The base (non-focal) loss at the same step.
    pub base_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossRow>,
    pub events: Vec<String>,
}

impl TrainLog {
    pub fn event(&mut self, msg: String) {
        log::info!("{msg}");
        self.events.push(msg);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "stage,epoch,step,objective,loss,base_loss")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.stage, r.epoch, r.step, r.objective, r.loss, r.base_loss)?;
        }
        Ok(())
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
        self.events.extend(other.events);
    }

    /// Mean base loss over the first and last `k` steps of `stage`.
    pub fn reduction(&self, stage: &str, k: usize) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.stage == stage).map(|r| r.base_loss).collect();
        if v.len() < k || k == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&v[..k]), mean(&v[v.len() - k..])))
    }
}

/// One optimization phase over a graph.
#[derive(Clone, Debug)]
pub struct Phase {
    pub name: String,
    pub layout: Layout,
    pub batch: usize,
    pub epochs: usize,
    pub mode: Mode,
    pub lr_encoder: Option<f64>,
    pub lr_decoder: Option<f64>,
    pub seed: u64,
}

fn objective(cfg: &TrainConfig, focal: bool, target: &Tensor) -> Result<(LossSpec<f32>, &'static str)> {
    Ok(match cfg.task {
        Task::Detection if focal => (
            LossSpec::FocalL2 {
                target: target.clone(),
                spec: cfg.focal,
                mode: cfg.focal_mode,
            },
            "focal-l2",
        ),
        Task::Detection => (LossSpec::L2 { target: target.clone() }, "l2"),
        Task::Segmentation => {
            let labels = target.data().iter().map(|&v| (v > 0.5) as usize).collect();
            let class_weights = cfg.class_weights.clone();
            if focal {
                (
                    LossSpec::FocalCe {
                        labels,
                        gamma: cfg.focal.gamma,
                        class_weights,
                    },
                    "focal-ce",
                )
            } else {
                (LossSpec::CrossEntropy { labels, class_weights }, "ce")
            }
        }
    })
}

fn base_value(cfg: &TrainConfig, pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(match cfg.task {
        Task::Detection => crate::objectives::l2(pred, target)? as f64,
        Task::Segmentation => {
            let labels: Vec<usize> = target.data().iter().map(|&v| (v > 0.5) as usize).collect();
            crate::objectives::cross_entropy(pred, &labels, cfg.class_weights.as_deref())? as f64
        }
    })
}

fn plateaued(history: &[f64], window: usize, tol: f64) -> bool {
    if history.len() <= window {
        return false;
    }
    let old = history[history.len() - 1 - window];
    let new = history[history.len() - 1];
    old <= 0.0 || (old - new) / old < tol
}

/// Runs `phase` on `graph`, updating its parameters and statistics in place.
pub fn run_phase(graph: &mut ModelGraph, ds: Arc<Dataset>, cfg: &TrainConfig, phase: &Phase) -> Result<TrainLog> {
    cfg.validate()?;
    let sampler = Arc::new(PatchSampler::new(ds, cfg.sampler(), phase.layout)?);
    let total = phase.epochs * cfg.steps_per_epoch;
    let mut stream = PatchStream::spawn(sampler, phase.seed, total * phase.batch, cfg.queue_depth);
    let mut adam = Adam::<f32>::new(cfg.adam)?;
    let mut log = TrainLog::default();
    let mut focal = false;
    let mut history = Vec::new();
    let part_of: std::collections::HashMap<String, Part> = graph
        .layers
        .iter()
        .flat_map(|l| l.param_names().into_iter().map(move |n| (n, l.part)))
        .collect();
    let mut step = 0;
    for epoch in 0..phase.epochs {
        let mut epoch_sum = 0.0;
        let objective_name = if focal { "focal" } else { "base" };
        for _ in 0..cfg.steps_per_epoch {
            let patches = (0..phase.batch)
                .map(|_| stream.next().unwrap_or_else(|| Err(Error::Data("patch stream ended early".into()))))
                .collect::<Result<Vec<_>>>()?;
            let (x, target) = collate(&patches)?;
            let mut tape = Tape::<f32>::for_params(graph.params.version());
            let xv = tape.constant(x);
            let out = graph.forward(&graph.params, &mut tape, xv, phase.mode, false)?;
            let pred = tape.value(&out.output).clone();
            let (spec, name) = objective(cfg, focal, &target)?;
            let base = base_value(cfg, &pred, &target)?;
            let l = tape.loss(out.output, spec)?;
            let loss = tape.value(&l).item() as f64;
            if !loss.is_finite() || !base.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let grads = tape.backward_checked(l, Some(graph.params.version()))?;
            if let Some((n, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                log::error!("non-finite gradient for `{n}` at step {step}");
                return Err(Error::Divergence { step, loss });
            }
            let lr = |n: &str| match part_of.get(n) {
                Some(Part::Encoder) => phase.lr_encoder,
                Some(Part::Decoder) => phase.lr_decoder,
                None => None,
            };
            adam.step(graph.params.params_mut(), &grads, lr)?;
            let buffers = graph.params.buffers_mut();
            for (layer, stats) in &out.bn_stats {
                let rm = buffers.get_mut(&format!("{layer}.running_mean")).expect("bn buffer");
                update_running(rm, &stats.mean, BN_MOMENTUM);
                let rv = buffers.get_mut(&format!("{layer}.running_var")).expect("bn buffer");
                update_running(rv, &stats.var_unbiased, BN_MOMENTUM);
            }
            epoch_sum += loss;
            log.rows.push(LossRow {
                stage: phase.name.clone(),
                epoch,
                step,
                objective: name.to_string(),
                loss,
                base_loss: base,
            });
            step += 1;
        }
        let mean = epoch_sum / cfg.steps_per_epoch as f64;
        log::debug!("{} epoch {epoch} ({objective_name}): mean loss {mean}", phase.name);
        if !focal {
            history.push(mean);
            if cfg.focal_switch && plateaued(&history, cfg.plateau_window, cfg.plateau_tolerance) {
                focal = true;
                log.event(format!(
                    "{}: loss switched to focal form after epoch {epoch} (plateau over {} epochs)",
                    phase.name, cfg.plateau_window
                ));
            }
        }
    }
    Ok(log)
}

pub struct Stage1 {
    pub graph: ModelGraph,
    pub log: TrainLog,
}

/// Trains the 2D network on slice triples.
pub fn train_stage1(ds: Arc<Dataset>, net: &NetConfig, cfg: &TrainConfig) -> Result<Stage1> {
    let mut net = net.clone();
    net.out_channels = cfg.out_channels();
    net.patch = cfg.patch;
    let mut graph = build_mcgcn(&net, cfg.seed)?;
    let phase = Phase {
        name: "stage1".into(),
        layout: Layout::Planar,
        batch: cfg.batch_2d,
        epochs: cfg.epochs_stage1,
        mode: Mode::train(),
        lr_encoder: Some(cfg.lr_stage1),
        lr_decoder: Some(cfg.lr_stage1),
        seed: cfg.seed ^ 0x5151,
    };
    let mut log = TrainLog::default();
    log.event(format!("stage1: {} epochs of {} steps", cfg.epochs_stage1, cfg.steps_per_epoch));
    log.extend(run_phase(&mut graph, ds, cfg, &phase)?);
    Ok(Stage1 { graph, log })
}

pub struct Stage2 {
    pub graph: ModelGraph,
    pub log: TrainLog,
    pub transfer: TransferReport,
}

/// Encoder tensors (parameters and statistics) as raw bytes.
pub fn encoder_bytes(graph: &ModelGraph) -> Vec<(String, Vec<u8>)> {
    graph
        .names_in(Part::Encoder)
        .into_iter()
        .map(|n| {
            let t = graph.params.get(&n).expect("encoder tensor");
            (n, t.data().iter().flat_map(|v| v.to_le_bytes()).collect())
        })
        .collect()
}

/// Builds the hybrid network from a 2D checkpoint and trains its decoder
/// with the encoder locked, then optionally everything jointly.
pub fn train_stage2(ds: Arc<Dataset>, ckpt2d: &Checkpoint, net: &NetConfig, cfg: &TrainConfig) -> Result<Stage2> {
    let mut net = net.clone();
    net.out_channels = cfg.out_channels();
    net.patch = cfg.patch;
    let mut g2 = build_mcgcn(&net, cfg.seed)?;
    ckpt2d.load_into(&mut g2.params)?;
    let (ck3, transfer) = transfer_encoder(ckpt2d, &auto_rules(&g2))?;
    let (mut graph, random) = build_ahnet(&net, cfg.seed ^ 0xA4, Some(&ck3))?;
    let mut log = TrainLog::default();
    log.event(format!(
        "stage2: {} tensors transferred, {} randomly initialized",
        ck3.len(),
        random.len()
    ));
    let locked_mode = Mode {
        bn_batch_stats: [!cfg.freeze_bn_when_locked, true],
        trainable: [false, true],
    };
    let before = encoder_bytes(&graph);
    let locked = Phase {
        name: "stage2".into(),
        layout: Layout::Volumetric,
        batch: cfg.batch_3d,
        epochs: cfg.epochs_stage2,
        mode: locked_mode,
        lr_encoder: None,
        lr_decoder: Some(cfg.lr_stage2),
        seed: cfg.seed ^ 0x5252,
    };
    log.extend(run_phase(&mut graph, ds.clone(), cfg, &locked)?);
    let after = encoder_bytes(&graph);
    let changed: Vec<&str> = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let stats_only = !cfg.freeze_bn_when_locked
        && changed
            .iter()
            .all(|n| n.ends_with(".running_mean") || n.ends_with(".running_var"));
    if !changed.is_empty() && !stats_only {
        return Err(Error::Transfer(format!("locked encoder changed: {}", changed.join(", "))));
    }
    log.event(format!("stage2: encoder verified byte-identical over the locked phase ({} tensors)", before.len()));
    if cfg.epochs_joint > 0 {
        let joint = Phase {
            name: "joint".into(),
            layout: Layout::Volumetric,
            batch: cfg.batch_3d,
            epochs: cfg.epochs_joint,
            mode: Mode::train(),
            lr_encoder: Some(cfg.lr_joint),
            lr_decoder: Some(cfg.lr_joint),
            seed: cfg.seed ^ 0x5353,
        };
        log.extend(run_phase(&mut graph, ds, cfg, &joint)?);
    }
    Ok(Stage2 { graph, log, transfer })
}
