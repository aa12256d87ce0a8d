//! Staged training schedule with parameter freezing.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adamw::AdamW;
use super::loss::{frame_loss, hierarchical_weight, LossKind, Rollout, LAMBDAS};
use crate::codec::{Group, ModelState, Quantizer, Reference};
use crate::error::{contract_err, Result};
use crate::eval::synthetic::{generate, Generator, SequenceSpec};
use crate::tensor::{Tape, Tensor};

/// Parameter subset updated by a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subset {
    /// Motion estimation, motion coder and motion steps.
    Inter,
    /// Context mining, contextual coder, PQA, RQA and context steps.
    Recon,
    All,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::Inter => "inter",
            Subset::Recon => "recon",
            Subset::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "inter" => Subset::Inter,
            "recon" => Subset::Recon,
            "all" => Subset::All,
            _ => return contract_err(format!("unknown subset {s:?}")),
        })
    }
}

/// One row of the training table.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleStage {
    /// Clip length, intra frame included.
    pub frames: usize,
    pub subset: Subset,
    pub loss: LossKind,
    pub lr: f64,
    /// Passes over the corpus; fractions run a prefix of a pass.
    pub epochs: f64,
    /// Upper bound of the repeat count drawn by the repeat-long loss.
    pub max_repeats: usize,
}

impl ScheduleStage {
    pub fn new(frames: usize, subset: Subset, loss: LossKind, lr: f64, epochs: f64) -> Self {
        ScheduleStage {
            frames,
            subset,
            loss,
            lr,
            epochs,
            max_repeats: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use LossKind::*;
        let ok = match self.subset {
            Subset::Inter => matches!(self.loss, MeD | MeRD),
            Subset::Recon => matches!(self.loss, RecD | RecRD),
            Subset::All => matches!(self.loss, All | Cascade | RepeatLong),
        };
        if !ok {
            return contract_err(format!(
                "loss {} cannot train subset {}",
                self.loss.name(),
                self.subset.name()
            ));
        }
        let min_frames = if self.loss == RepeatLong { 3 } else { 2 };
        if self.frames < min_frames {
            return contract_err(format!("stage needs at least {min_frames} frames, got {}", self.frames));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.epochs >= 0.0 && self.epochs.is_finite()) {
            return contract_err(format!("invalid lr {} or epochs {}", self.lr, self.epochs));
        }
        if self.max_repeats > 0 && self.loss != RepeatLong {
            return contract_err("repeats only apply to the repeat-long loss");
        }
        Ok(())
    }

    /// Whether parameters of `group` are updated by this stage.
    pub fn trains(&self, group: Group) -> bool {
        match (self.subset, group) {
            (Subset::All, _) => true,
            (Subset::Inter, Group::MotionNet) => true,
            (Subset::Inter, Group::MotionEntropy) => self.loss == LossKind::MeRD,
            (Subset::Recon, Group::ReconNet) => true,
            (Subset::Recon, Group::ReconEntropy) => self.loss == LossKind::RecRD,
            _ => false,
        }
    }

    /// Cascade length of a rollout stage.
    pub fn cascade_len(&self) -> usize {
        match self.loss {
            LossKind::RepeatLong => self.frames - 2,
            _ => self.frames - 1,
        }
    }
}

/// Repeat bound used when repeated compression is enabled.
pub const MAX_REPEATS: usize = 3;

/// The full training table. `repeat` and `long` select the final stage:
/// repeated compression of the first inter frame and/or 19-frame clips.
pub fn full_schedule(repeat: bool, long: bool) -> Vec<ScheduleStage> {
    use LossKind::{Cascade, MeD, MeRD, RecD, RecRD, RepeatLong};
    use Subset::{Inter, Recon};
    let s = ScheduleStage::new;
    let mut stages = vec![
        s(2, Inter, MeD, 1e-4, 2.0),
        s(2, Recon, RecD, 1e-4, 1.0),
        s(3, Recon, RecD, 1e-4, 1.0),
        s(6, Recon, RecD, 1e-4, 1.0),
        s(6, Inter, MeD, 1e-4, 2.0),
        s(6, Inter, MeRD, 1e-4, 6.0),
        s(6, Recon, RecD, 1e-4, 2.0),
        s(6, Recon, RecRD, 1e-4, 6.0),
        s(6, Subset::All, LossKind::All, 1e-4, 4.0),
        s(6, Subset::All, LossKind::All, 5e-5, 3.0),
        s(6, Subset::All, LossKind::All, 1e-5, 3.0),
        s(6, Subset::All, LossKind::All, 5e-6, 4.0),
        s(6, Subset::All, Cascade, 5e-5, 2.0),
        s(6, Subset::All, Cascade, 5e-6, 2.0),
        s(6, Subset::All, Cascade, 1e-6, 1.0),
    ];
    let frames = if long { 19 } else { 6 };
    if repeat || long {
        let mut last = s(frames, Subset::All, RepeatLong, 1e-6, 1.0);
        last.max_repeats = if repeat { MAX_REPEATS } else { 0 };
        stages.push(last);
    } else {
        stages.push(s(frames, Subset::All, Cascade, 1e-6, 1.0));
    }
    stages
}

/// [`full_schedule`] with epochs multiplied by `epoch_factor` and
/// learning rates by `lr_factor`.
pub fn scaled_schedule(repeat: bool, long: bool, epoch_factor: f64, lr_factor: f64) -> Vec<ScheduleStage> {
    full_schedule(repeat, long)
        .into_iter()
        .map(|mut s| {
            s.epochs *= epoch_factor;
            s.lr *= lr_factor;
            s
        })
        .collect()
}

/// Deterministic training clips drawn from the synthetic generators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corpus {
    pub spec: SequenceSpec,
    /// Number of distinct clips; one epoch visits each once.
    pub size: usize,
    pub seed: u64,
}

impl Corpus {
    pub fn new(width: usize, height: usize, frames: usize, size: usize, seed: u64) -> Self {
        Corpus {
            spec: SequenceSpec::new(width, height, frames),
            size,
            seed,
        }
    }

    pub fn clip(&self, i: usize) -> Result<Vec<Tensor<f32>>> {
        let generator = Generator::ALL[i % Generator::ALL.len()];
        let seed = self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        generate(&self.spec, generator, seed)
    }
}

/// Mean training loss over one epoch (or the trailing part of one).
#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Updates skipped because the loss or a gradient was not finite.
    pub skipped: usize,
}

impl StageLog {
    pub const CSV_HEADER: &'static str = "stage,epoch,mean_loss,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.stage, self.epoch, self.mean_loss, self.lr)
    }
}

/// Model, optimizer and progress of a schedule run.
pub struct Trainer {
    pub model: ModelState,
    pub opt: AdamW,
    data_rng: ChaCha8Rng,
    noise_seed: u64,
    /// Gradients are rescaled to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Lagrange multipliers indexed by rate point.
    pub lambdas: [f64; 4],
    /// Forward passes spent on the first inter frame by repeat-long rollouts.
    pub first_frame_passes: usize,
}

impl Trainer {
    /// Clip order, rate indices and quantization noise all derive from
    /// `seed`, independently of the model configuration.
    pub fn new(model: ModelState, seed: u64) -> Self {
        let opt = AdamW::new(model.params());
        Trainer {
            model,
            opt,
            data_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            noise_seed: seed.wrapping_mul(0xd134_2543_de82_ef95),
            clip_norm: None,
            lambdas: LAMBDAS,
            first_frame_passes: 0,
        }
    }

    fn next_noise(&mut self) -> Quantizer {
        self.noise_seed = self.noise_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        Quantizer::train(self.noise_seed)
    }

    fn apply(&mut self, mut grads: Vec<Option<Tensor<f32>>>, lr: f64) -> bool {
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return false;
        }
        if let Some(max) = self.clip_norm {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data())
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let k = (max / norm) as f32;
                for g in grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        self.opt.step(self.model.params_mut(), &grads, lr);
        true
    }

    /// Per-frame stage: one update per inter frame, references detached.
    fn frame_steps(&mut self, stage: &ScheduleStage, clip: &[Tensor<f32>], rate: usize) -> Result<(f64, usize)> {
        let lambda = self.lambdas[rate];
        let mut reference = {
            let tape = Tape::inference();
            let net = self.model.bind(&tape, |_| false);
            let x0 = tape.constant(clip[0].clone());
            let f = net.intra_feature(x0)?;
            (clip[0].clone(), (*f.value()).clone())
        };
        let (mut total, mut skipped) = (0.0, 0);
        for (p, x) in clip.iter().enumerate().skip(1) {
            let mut quant = self.next_noise();
            let tape = Tape::<f32>::new();
            let net = self.model.bind(&tape, |g| stage.trains(g));
            let r = Reference {
                frame: tape.constant(reference.0.clone()),
                feature: tape.constant(reference.1.clone()),
            };
            let out = net.forward_p_frame(tape.constant(x.clone()), &r, rate as f64, p, &mut quant)?;
            let loss = frame_loss(stage.loss, &(&out).into(), hierarchical_weight(p)?, lambda)?;
            let value = loss.value().item() as f64;
            reference = ((*out.x_hat.value()).clone(), (*out.feature.value()).clone());
            let vars = net.vars().to_vec();
            drop(net);
            if !value.is_finite() {
                skipped += 1;
                continue;
            }
            let mut grads = tape.backward(loss)?;
            let grads = vars.iter().map(|&v| grads.take(v)).collect();
            if !self.apply(grads, stage.lr) {
                skipped += 1;
            }
            total += value;
        }
        Ok((total / (clip.len() - 1) as f64, skipped))
    }

    /// Rollout stage: one update per clip through a single tape.
    fn rollout_step(&mut self, stage: &ScheduleStage, clip: &[Tensor<f32>], rate: usize) -> Result<(f64, usize)> {
        let repeats = match stage.loss {
            LossKind::RepeatLong => self.data_rng.gen_range(0..=stage.max_repeats),
            _ => 0,
        };
        let mut quant = self.next_noise();
        let tape = Tape::<f32>::new();
        let net = self.model.bind(&tape, |g| stage.trains(g));
        let frames: Vec<_> = clip.iter().map(|x| tape.constant(x.clone())).collect();
        let rollout = Rollout {
            net: &net,
            frames: &frames,
            rate: rate as f64,
            lambda: self.lambdas[rate],
        };
        let loss = match stage.loss {
            LossKind::RepeatLong => {
                let (loss, passes) = rollout.repeat_long(stage.cascade_len(), repeats, &mut quant)?;
                self.first_frame_passes += passes;
                loss
            }
            _ => rollout.cascade(stage.cascade_len(), &mut quant)?,
        };
        let value = loss.value().item() as f64;
        let vars = net.vars().to_vec();
        drop(net);
        if !value.is_finite() {
            return Ok((value, 1));
        }
        let mut grads = tape.backward(loss)?;
        let grads = vars.iter().map(|&v| grads.take(v)).collect();
        let skipped = usize::from(!self.apply(grads, stage.lr));
        Ok((value, skipped))
    }

    /// Trains the motion estimator alone on `mse(x, warp(x_prev, flow))`
    /// over random frame pairs; returns the mean loss of the last tenth.
    pub fn warm_up_motion(&mut self, corpus: &Corpus, steps: usize, lr: f64) -> Result<f64> {
        let mut tail = (0.0, 0);
        for step in 0..steps {
            let i = self.data_rng.gen_range(0..corpus.size);
            let t = self.data_rng.gen_range(1..corpus.spec.frames);
            let clip = corpus.clip(i)?;
            let tape = Tape::<f32>::new();
            let net = self.model.bind(&tape, |g| g == Group::MotionNet);
            let (prev, x) = (tape.constant(clip[t - 1].clone()), tape.constant(clip[t].clone()));
            let flow = net.estimate_motion(x, prev)?;
            let loss = x.mse(prev.warp(flow)?)?;
            let value = loss.value().item() as f64;
            let vars = net.vars().to_vec();
            drop(net);
            let mut grads = tape.backward(loss)?;
            let grads = vars.iter().map(|&v| grads.take(v)).collect();
            self.apply(grads, lr);
            if 10 * step >= 9 * steps {
                tail = (tail.0 + value, tail.1 + 1);
            }
        }
        Ok(tail.0 / tail.1.max(1) as f64)
    }

    /// Runs `stages` in order, writing CSV logs to `log` when given.
    pub fn run(
        &mut self,
        stages: &[ScheduleStage],
        corpus: &Corpus,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StageLog>> {
        for s in stages {
            s.validate()?;
        }
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", StageLog::CSV_HEADER)?;
        }
        let mut logs = Vec::new();
        for (i, stage) in stages.iter().enumerate() {
            let rows = self.run_stage(i, stage, corpus)?;
            if let Some(w) = log.as_deref_mut() {
                for r in &rows {
                    writeln!(w, "{}", r.csv_row())?;
                }
                w.flush()?;
            }
            logs.extend(rows);
        }
        Ok(logs)
    }

    /// Runs one stage and returns its per-epoch logs.
    pub fn run_stage(&mut self, index: usize, stage: &ScheduleStage, corpus: &Corpus) -> Result<Vec<StageLog>> {
        stage.validate()?;
        if corpus.spec.frames < stage.frames {
            return contract_err(format!(
                "stage needs {}-frame clips, corpus has {}",
                stage.frames, corpus.spec.frames
            ));
        }
        let total = (stage.epochs * corpus.size as f64).round() as usize;
        let mut logs = Vec::new();
        let mut order: Vec<usize> = (0..corpus.size).collect();
        let mut done = 0;
        let mut epoch = 0;
        while done < total {
            order.shuffle(&mut self.data_rng);
            let n = (total - done).min(corpus.size);
            let (mut sum, mut skipped) = (0.0, 0);
            for &i in &order[..n] {
                let rate = self.data_rng.gen_range(0..self.lambdas.len());
                let start = self.data_rng.gen_range(0..=corpus.spec.frames - stage.frames);
                let clip = corpus.clip(i)?;
                let clip = &clip[start..start + stage.frames];
                let (loss, s) = if stage.loss.is_rollout() {
                    self.rollout_step(stage, clip, rate)?
                } else {
                    self.frame_steps(stage, clip, rate)?
                };
                sum += loss;
                skipped += s;
            }
            logs.push(StageLog {
                stage: index,
                epoch,
                mean_loss: sum / n as f64,
                lr: stage.lr,
                skipped,
            });
            done += n;
            epoch += 1;
        }
        Ok(logs)
    }
}

/// Runs `stages` in order on `model`, writing CSV logs to `log` when given.
pub fn run_schedule(
    stages: &[ScheduleStage],
    model: ModelState,
    corpus: &Corpus,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<(Trainer, Vec<StageLog>)> {
    let mut trainer = Trainer::new(model, seed);
    let logs = trainer.run(stages, corpus, log)?;
    Ok((trainer, logs))
}
