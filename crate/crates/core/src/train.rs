//! The training loop: batches, loss, SGD updates, logging and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{make_batch, AugmentationConfig, Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::model::ModelGraph;
use crate::optim::{sgd_step, ClrSchedule, SgdState};
use crate::supervision::{SigmaSchedule, DEFAULT_PAF_WIDTH};
use crate::tensor::{Element, ParamStore};
use crate::weights::save_weights;

pub const LOG_HEADER: &str = "step\tepoch\tlr\tsigma\tloss";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// First epoch to run; earlier epochs are treated as done.
    pub start_epoch: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Constant learning rate in place of the cyclic schedule.
    pub fixed_lr: Option<f64>,
    /// Checkpoint and log directory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub sigma: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Seed for the forward pass of one step.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One forward/backward/update on a prepared batch. Returns the loss,
/// leaving the parameters untouched when it is not finite.
pub fn train_step<T: Element>(
    model: &ModelGraph,
    params: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    batch: &Batch<T>,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut run = model
        .graph
        .forward(params, vec![batch.images.clone()], Mode::Train, seed)?;
    let preds = model
        .heads
        .iter()
        .map(|h| run.output(&h.name))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<_> = batch
        .targets
        .iter()
        .map(|t| run.tape.constant(t.clone()))
        .collect();
    let loss_var = run.tape.mse_loss(&preds, &targets)?;
    let loss = run.tape.value(loss_var).data()[0].f64();
    if !loss.is_finite() {
        return Ok(loss);
    }
    run.tape.backward(loss_var)?;
    sgd_step(params, run.param_grads(), state, lr)?;
    run.update_running_stats(params)?;
    Ok(loss)
}

/// Replace BN running statistics with the plain average of batch
/// statistics over `data` under the current weights. No augmentation.
pub fn recalibrate_batch_norm<T: Element>(
    model: &ModelGraph,
    params: &mut ParamStore<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<()> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "recalibration needs data and a positive batch size".into(),
        ));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let schedule = SigmaSchedule::default();
    for (k, chunk) in ids.chunks(batch_size).enumerate() {
        let batch = make_batch::<T>(
            data,
            chunk,
            model,
            None,
            &schedule,
            DEFAULT_PAF_WIDTH,
            0,
            0.0,
        )?;
        let run = model
            .graph
            .forward(params, vec![batch.images], Mode::Train, 0)?;
        run.blend_running_stats(params, 1.0 / (k + 1) as f64)?;
    }
    Ok(())
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:04}"))
}

/// Write weights, optimizer state and the resolved config.
pub fn save_checkpoint<T: Element>(
    dir: &Path,
    config: &RunConfig,
    params: &ParamStore<T>,
    state: &SgdState<T>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_weights(params, &dir.join("weights.epw"))?;
    state.save(params, &dir.join("optimizer.epw"))?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    Ok(())
}

/// Run epochs `opts.start_epoch..config.train.epochs`.
pub fn train<T: Element>(
    config: &RunConfig,
    model: &ModelGraph,
    data: &Dataset,
    params: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let t = &config.train;
    let schedule = ClrSchedule::new(t.lr_max, &t.sigma)?;
    let aug_cfg = AugmentationConfig::default();
    let aug = t.augment.then_some(&aug_cfg);
    let per_epoch = data.len().div_ceil(t.batch_size);

    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.tsv");
            let fresh = opts.start_epoch == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(f, "{LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut report = TrainReport::default();
    let mut last_good = opts
        .out_dir
        .as_ref()
        .filter(|_| opts.start_epoch > 0)
        .map(|d| checkpoint_dir(d, opts.start_epoch - 1));
    let mut step = opts.start_epoch * per_epoch;
    let mut taken = 0usize;
    'epochs: for epoch in opts.start_epoch..t.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            t.seed.wrapping_add(epoch as u64),
        ));
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            if opts.max_steps.is_some_and(|m| taken >= m) {
                break 'epochs;
            }
            let frac = epoch as f64 + b as f64 / per_epoch as f64;
            let lr = opts.fixed_lr.unwrap_or_else(|| schedule.lr_at(frac));
            let batch =
                make_batch::<T>(data, chunk, model, aug, &t.sigma, t.paf_width, t.seed, frac)?;
            let loss = train_step(model, params, state, &batch, lr, step_seed(t.seed, step))?;
            if let Some(f) = log.as_mut() {
                writeln!(
                    f,
                    "{step}\t{frac:.4}\t{lr:.6e}\t{}\t{loss:.6e}",
                    batch.sigma
                )?;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss,
                    last_good,
                });
            }
            report.steps.push(StepRecord {
                step,
                epoch: frac,
                lr,
                sigma: batch.sigma,
                loss,
            });
            step += 1;
            taken += 1;
        }
        if let Some(dir) = &opts.out_dir {
            let ck = checkpoint_dir(dir, epoch);
            save_checkpoint(&ck, config, params, state)?;
            report.checkpoints.push(ck.clone());
            last_good = Some(ck);
        }
    }
    Ok(report)
}
