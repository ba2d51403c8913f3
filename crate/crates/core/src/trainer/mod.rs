//! The optimization loop: weighted-resampled batches, fusion, the summed
//! contrastive losses, backward and AdamW on the cyclic schedule.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    blob_path, load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_FORMAT,
};

use crate::data::{instance_weights, sample_batch, Batch, ClassVocabulary, Dataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{build_sign_matrix, identity_owners, sigmoid_pair_loss};
use crate::model::{fuse_batch, stack_views, InitConfig, ModelConfig, ParamVars, Parameters};
use crate::numerics::{AdamW, AdamWConfig, Graph, LrSchedule, Tensor};

/// The four incremental loss compositions of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Class loss, uniform instance sampling.
    ClassOnly,
    /// Class loss with inverse-frequency resampling.
    Resampling,
    /// Adds the multiview loss.
    Multiview,
    /// Adds the class mask to both losses.
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub resampling: bool,
    pub multiview_loss: bool,
    pub class_mask: bool,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::ClassOnly,
        AblationMode::Resampling,
        AblationMode::Multiview,
        AblationMode::Final,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::ClassOnly => "class-only",
            AblationMode::Resampling => "resampling",
            AblationMode::Multiview => "multiview",
            AblationMode::Final => "final",
        }
    }

    pub fn toggles(self) -> LossToggles {
        let rank = Self::ALL.iter().position(|&m| m == self).unwrap();
        LossToggles {
            resampling: rank >= 1,
            multiview_loss: rank >= 2,
            class_mask: rank >= 3,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sampler: SamplerConfig,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub mode: AblationMode,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
    pub model: ModelConfig,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            sampler: SamplerConfig::default(),
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            mode: AblationMode::Final,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            model: ModelConfig::default(),
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        self.sampler.validate()?;
        self.schedule.validate()?;
        self.model.validate()?;
        if self.mode.toggles().multiview_loss && self.sampler.views_target == 0 {
            return Err(Error::Config(
                "the multiview loss needs views_target ≥ 1".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, instances: usize) -> usize {
        instances.div_ceil(self.sampler.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_class: f64,
    pub loss_multiview: Option<f64>,
    pub loss_total: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss_class: f64,
    pub loss_multiview: Option<f64>,
    pub loss_total: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Losses and parameter gradients for one sampled batch.
pub fn batch_gradients(
    params: &Parameters,
    dataset: &Dataset,
    vocab: &ClassVocabulary,
    batch: &Batch,
    toggles: LossToggles,
) -> Result<StepResult> {
    let config = *params.config();
    let records: Vec<_> = batch.instances.iter().map(|&i| &dataset.instances()[i]).collect();
    let inputs: Vec<Tensor> = records
        .iter()
        .zip(&batch.inputs)
        .map(|(r, idx)| r.descriptors(idx))
        .collect();
    let (stacked, layout) = stack_views(&inputs.iter().collect::<Vec<_>>())?;
    let class_ids: Vec<i64> = records.iter().map(|r| r.class_id).collect();
    let d = dataset.descriptor_dim();
    let mut targets = Vec::with_capacity(class_ids.len() * d);
    for &c in &class_ids {
        targets.extend_from_slice(vocab.embedding(c)?);
    }

    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params, true);
    let x = g.constant(stacked);
    let fused = fuse_batch(&mut g, &pv, &config, x, &layout)?;
    let t = g.exp(pv.get("loss.log_t"));
    // stored as the scoring bias; the loss form subtracts its bias
    let b = g.scale(pv.get("loss.b"), -1.0);
    let bsz = class_ids.len();
    let y = g.constant(Tensor::matrix(bsz, d, targets));
    let signs = build_sign_matrix(&class_ids, &identity_owners(bsz), toggles.class_mask)?;
    let lc = sigmoid_pair_loss(&mut g, fused, y, &signs, t, b, bsz as f64)?;
    let (total, lmv) = if toggles.multiview_loss {
        let mut owners = Vec::new();
        let mut rows = Vec::new();
        for (i, (r, idx)) in records.iter().zip(&batch.targets).enumerate() {
            for &v in idx {
                owners.push(i);
                rows.extend_from_slice(&r.views[v].descriptor);
            }
        }
        if owners.is_empty() {
            return Err(Error::Empty("unseen view set"));
        }
        let u = g.constant(Tensor::matrix(owners.len(), d, rows));
        let signs = build_sign_matrix(&class_ids, &owners, toggles.class_mask)?;
        let norm = (bsz * owners.len()) as f64;
        let lmv = sigmoid_pair_loss(&mut g, fused, u, &signs, t, b, norm)?;
        (g.add(lc, lmv)?, Some(lmv))
    } else {
        (lc, None)
    };
    let grads = g.backward(total)?;
    let named = pv
        .iter()
        .map(|(name, v)| {
            let grad = grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
            Ok((name.to_string(), grad))
        })
        .collect::<Result<_>>()?;
    Ok(StepResult {
        loss_class: g.value(lc).item(),
        loss_multiview: lmv.map(|v| g.value(v).item()),
        loss_total: g.value(total).item(),
        grads: named,
    })
}

/// Random stream for `step`; every step gets its own stream so batches do
/// not depend on what earlier steps consumed.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

pub struct TrainOutcome {
    pub params: Parameters,
    pub log: Vec<TrainLogRecord>,
}

/// Where checkpoints go; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
}

fn checkpoint_metadata(cfg: &TrainConfig, steps: u64) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("mode".into(), cfg.mode.as_str().into());
    m.insert("seed".into(), cfg.seed.into());
    m.insert("steps".into(), steps.into());
    m.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
    m
}

fn norm_report(params: &Parameters) -> String {
    let mut norms: Vec<(String, f64)> = params.iter().map(|(n, t)| (n.to_string(), t.norm())).collect();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.4e}")).collect();
    format!("global parameter norm {:.4e}; largest: {}", params.global_norm(), top.join(", "))
}

fn intermediate_path(path: &Path, step: u64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    path.with_file_name(format!("{stem}-step{step}.json"))
}

/// Runs `cfg.epochs × ⌈|dataset| / batch_size⌉` optimizer steps. A pure
/// function of the dataset, vocabulary and config, apart from `wall_ms`.
pub fn train(
    dataset: &Dataset,
    vocab: &ClassVocabulary,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    mut on_step: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if cfg.model.descriptor_dim != dataset.descriptor_dim() {
        return Err(Error::Config(format!(
            "model descriptor_dim {} differs from dataset {}",
            cfg.model.descriptor_dim,
            dataset.descriptor_dim()
        )));
    }
    dataset.check_vocabulary(vocab)?;
    let toggles = cfg.mode.toggles();
    let weights = if toggles.resampling {
        instance_weights(dataset, vocab)?
    } else {
        vec![1.0; dataset.len()]
    };
    let sampler = SamplerConfig {
        views_target: if toggles.multiview_loss { cfg.sampler.views_target } else { 0 },
        ..cfg.sampler.clone()
    };

    let mut params = Parameters::init(cfg.model, cfg.init, cfg.seed)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let decay: Vec<bool> = names.iter().map(|n| Parameters::decays(n)).collect();
    let mut opt = AdamW::new(cfg.optimizer, &params.iter().map(|(_, t)| t).collect::<Vec<_>>());
    let spe = cfg.steps_per_epoch(dataset.len());
    let total_steps = (cfg.epochs * spe) as u64;
    let mut log = Vec::with_capacity(total_steps as usize);
    let start = Instant::now();

    for step in 0..total_steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = sample_batch(dataset, &weights, &sampler, &mut rng)?;
        let mut result = batch_gradients(&params, dataset, vocab, &batch, toggles)?;
        let finite = result.loss_total.is_finite() && result.grads.values().all(Tensor::all_finite);
        if !finite {
            return Err(Error::Numerical {
                step,
                msg: format!("loss {}; {}", result.loss_total, norm_report(&params)),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = result
                .grads
                .values()
                .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                for t in result.grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let lr = cfg.schedule.lr_at(step);
        let grads: Vec<&Tensor> = names.iter().map(|n| &result.grads[n]).collect();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| t).collect();
        opt.step(&mut refs, &grads, &decay, lr)?;
        if !params.iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::Numerical {
                step,
                msg: format!("parameters became non-finite; {}", norm_report(&params)),
            });
        }
        let record = TrainLogRecord {
            step,
            epoch: step as usize / spe,
            lr,
            loss_class: result.loss_class,
            loss_multiview: result.loss_multiview,
            loss_total: result.loss_total,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_step(&record);
        log.push(record);
        let done = step + 1;
        if let Some(path) = &outputs.checkpoint {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total_steps {
                save_checkpoint(&params, checkpoint_metadata(cfg, done), &intermediate_path(path, done))?;
            }
        }
    }
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(&params, checkpoint_metadata(cfg, total_steps), path)?;
    }
    Ok(TrainOutcome { params, log })
}

/// Mean `loss_total` per epoch, in epoch order.
pub fn epoch_mean_losses(log: &[TrainLogRecord]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in log {
        let e = sums.entry(r.epoch).or_insert((0.0, 0));
        e.0 += r.loss_total;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}

pub fn write_log(path: &Path, log: &[TrainLogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
