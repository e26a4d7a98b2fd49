//! The epoch loop.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, crop_sample};
use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LatestCheckpoint};
use super::config::{lr_at, ExperimentConfig};
use super::data::TrainSample;
use super::TrainError;
use crate::model::{LossBreakdown, NoduleNet};
use crate::nn::optim::Sgd;
use crate::nn::ParamId;
use crate::tensor::Tensor;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Per-component means over the epoch's steps.
    pub losses: LossBreakdown,
    /// Total loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub wall_s: f64,
}

pub const LOG_FILE: &str = "train_log.jsonl";

/// RNG for one (epoch, slot) pair; slot 0 orders the epoch, slot `i + 1`
/// drives augmentation and sampling for the `i`-th step.
fn stream_rng(seed: u64, epoch: usize, slot: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 32) | slot as u64);
    r
}

pub struct Trainer {
    config: ExperimentConfig,
    net: NoduleNet,
    sgd: Sgd,
    epoch: usize,
    out_dir: Option<PathBuf>,
    history: Vec<EpochRecord>,
    lineage: Vec<PathBuf>,
}

impl Trainer {
    /// Fresh model. With `out_dir`, checkpoints and the log are written there.
    pub fn new(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Self, TrainError> {
        config.validate()?;
        let config = config.resolved();
        let net = NoduleNet::new(config.model_config(), config.seed)?;
        let sgd = Sgd::new(config.momentum as f32, config.weight_decay as f32);
        Ok(Self {
            config,
            net,
            sgd,
            epoch: 0,
            out_dir: out_dir.map(Path::to_path_buf),
            history: Vec::new(),
            lineage: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, out_dir: Option<&Path>) -> Result<Self, TrainError> {
        let mut t = Self::new(&ck.config, out_dir)?;
        ck.restore(t.net.params_mut(), &mut t.sgd)?;
        t.epoch = ck.epoch;
        Ok(t)
    }

    /// Continues from the newest checkpoint recorded in `out_dir`.
    pub fn resume(out_dir: &Path) -> Result<Self, TrainError> {
        let latest = LatestCheckpoint::load(out_dir)?
            .ok_or_else(|| TrainError::Checkpoint(format!("no {} in {}", LatestCheckpoint::FILE, out_dir.display())))?;
        let ck = load_checkpoint(&out_dir.join(&latest.path))?;
        let mut t = Self::from_checkpoint(&ck, Some(out_dir))?;
        t.lineage = latest.lineage;
        Ok(t)
    }

    pub fn net(&self) -> &NoduleNet {
        &self.net
    }

    pub fn into_net(self) -> NoduleNet {
        self.net
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.epoch, &self.config, self.net.params(), &self.sgd)
    }

    /// Runs the remaining epochs of the schedule.
    pub fn train(&mut self, data: &[TrainSample]) -> Result<(), TrainError> {
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    fn prepare<R: Rng>(&self, s: &TrainSample, rng: &mut R) -> Result<TrainSample, TrainError> {
        let shape = s.volume.shape();
        let (mut vol, mut nod) = (s.volume.clone(), s.nodules.clone());
        if let Some(c) = self.config.crop_size {
            if shape.iter().any(|&n| n > c) {
                let size = shape.map(|n| n.min(c));
                let anchor = (!nod.is_empty()).then(|| nod[rng.random_range(0..nod.len())].center_vox);
                let mut origin = [0; 3];
                for a in 0..3 {
                    let room = shape[a] - size[a];
                    let (lo, hi) = match anchor {
                        Some(c) => (
                            ((c[a] - size[a] as f64 + 1.0).ceil().max(0.0) as usize).min(room),
                            (c[a].floor() as usize).min(room),
                        ),
                        None => (0, room),
                    };
                    origin[a] = rng.random_range(lo..=hi.max(lo));
                }
                (vol, nod) = crop_sample(&vol, &nod, origin, size)?;
            }
        }
        let (volume, nodules) = augment(&vol, &nod, self.config.rotate_aug, rng)?;
        Ok(TrainSample { volume, nodules })
    }

    fn dump_divergence(&self, epoch: usize, step: usize, losses: &LossBreakdown) -> Option<PathBuf> {
        let dir = self.out_dir.as_ref()?;
        let path = dir.join(format!("diverged_epoch_{epoch}_step_{step}.ckpt"));
        save_checkpoint(&path, &self.checkpoint()).ok()?;
        let info = serde_json::json!({ "epoch": epoch, "step": step, "losses": losses });
        fs::write(path.with_extension("json"), info.to_string()).ok()?;
        Some(path)
    }

    /// One pass over `data` in a seeded order; checkpoints and logs if an
    /// output directory is set.
    pub fn run_epoch(&mut self, data: &[TrainSample]) -> Result<EpochRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.config)?;
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, epoch, 0));

        let batch = self.config.batch_size;
        let mut acc: HashMap<ParamId, Tensor> = HashMap::new();
        let mut in_batch = 0;
        let mut sums = LossBreakdown::default();
        let mut step_losses = Vec::with_capacity(data.len());
        for (step, &i) in order.iter().enumerate() {
            let mut rng = stream_rng(self.config.seed, epoch, step + 1);
            let sample = self.prepare(&data[i], &mut rng)?;
            let input = self.net.prepare_input(&sample.volume)?;
            let out = self.net.train_step(input, &sample.nodules, &self.config.loss_weights, &mut rng)?;
            let l = &out.losses;
            let finite = [Some(l.total), Some(l.ncs_cls), Some(l.ncs_reg), l.fpr_cls, l.fpr_reg, l.dice]
                .into_iter()
                .flatten()
                .all(f64::is_finite)
                && out.grads.values().all(Tensor::all_finite);
            if !finite {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    volume: sample.volume.id.clone(),
                    dump: self.dump_divergence(epoch, step, l),
                });
            }
            accumulate_losses(&mut sums, l);
            step_losses.push(l.total);
            for u in out.stat_updates {
                self.net.params_mut().set(u.id, u.value);
            }
            for (id, g) in out.grads {
                match acc.get_mut(&id) {
                    Some(a) => a.add_assign(&g),
                    None => {
                        acc.insert(id, g);
                    }
                }
            }
            in_batch += 1;
            if in_batch == batch || step + 1 == order.len() {
                let mut factor = 1.0 / in_batch as f64;
                if self.config.grad_clip > 0.0 {
                    let norm = factor * global_norm(&acc);
                    if norm > self.config.grad_clip {
                        factor *= self.config.grad_clip / norm;
                    }
                }
                if factor != 1.0 {
                    acc.values_mut().for_each(|g| g.scale(factor as f32));
                }
                self.sgd.step(self.net.params_mut(), &acc, lr as f32);
                acc.clear();
                in_batch = 0;
            }
        }
        let n = step_losses.len() as f64;
        let mean = |v: f64| v / n;
        let losses = LossBreakdown {
            total: mean(sums.total),
            ncs_cls: mean(sums.ncs_cls),
            ncs_reg: mean(sums.ncs_reg),
            fpr_cls: sums.fpr_cls.map(mean),
            fpr_reg: sums.fpr_reg.map(mean),
            dice: sums.dice.map(mean),
        };
        let record = EpochRecord {
            epoch,
            lr,
            losses,
            step_losses,
            wall_s: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        log::info!("epoch {epoch}: lr {lr:.2e} loss {:.4} ({:.1}s)", record.losses.total, record.wall_s);
        if self.out_dir.is_some() {
            self.persist(&record)?;
        }
        self.history.push(record.clone());
        Ok(record)
    }

    fn persist(&mut self, record: &EpochRecord) -> Result<(), TrainError> {
        let dir = self.out_dir.clone().expect("caller checked");
        fs::create_dir_all(&dir)?;
        let mut log = fs::OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        writeln!(log, "{}", serde_json::to_string(record).map_err(|e| TrainError::Io(e.to_string()))?)?;

        let name = PathBuf::from(format!("epoch_{}.ckpt", self.epoch));
        save_checkpoint(&dir.join(&name), &self.checkpoint())?;
        self.lineage.push(name.clone());
        let keep = self.config.keep_checkpoints;
        if keep > 0 && self.lineage.len() > keep {
            for old in &self.lineage[..self.lineage.len() - keep] {
                let _ = fs::remove_file(dir.join(old));
            }
        }
        LatestCheckpoint {
            epoch: self.epoch,
            path: name,
            lineage: self.lineage.clone(),
        }
        .save(&dir)
    }
}

fn global_norm(grads: &HashMap<ParamId, Tensor>) -> f64 {
    let mut ids: Vec<&ParamId> = grads.keys().collect();
    ids.sort();
    ids.iter()
        .map(|id| grads[*id].data().iter().map(|&v| v as f64 * v as f64).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn accumulate_losses(sum: &mut LossBreakdown, l: &LossBreakdown) {
    sum.total += l.total;
    sum.ncs_cls += l.ncs_cls;
    sum.ncs_reg += l.ncs_reg;
    let add = |s: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *s = Some(s.unwrap_or(0.0) + v);
        }
    };
    add(&mut sum.fpr_cls, l.fpr_cls);
    add(&mut sum.fpr_reg, l.fpr_reg);
    add(&mut sum.dice, l.dice);
}
