use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fedavg, RoundPlan, TrainConfig};
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::{AdamW, DiceReduction, Mode, Optimizer, OptimizerKind, Sgd, Tape, Tensor};

/// Training and validation data of one participant. `client` is `None` for pooled data.
#[derive(Clone, Debug)]
pub struct ClientData<T> {
    pub client: Option<usize>,
    pub train: Vec<Prepared<T>>,
    pub val: Vec<Prepared<T>>,
}

impl<T: Scalar> ClientData<T> {
    /// Key of the shuffle stream; depends only on the training ids.
    fn stream_key(&self) -> u64 {
        let ids: Vec<u64> = self.train.iter().map(|p| p.id).collect();
        rng::derive(ids.len() as u64, &ids)
    }

    fn label(&self) -> usize {
        self.client.unwrap_or(usize::MAX)
    }
}

/// Losses after one local epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub client: Option<usize>,
    /// Global epoch index, counted across rounds.
    pub epoch: usize,
    pub round: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

fn optimizer<T: Scalar>(cfg: &TrainConfig) -> Box<dyn Optimizer<T>> {
    match cfg.optimizer {
        OptimizerKind::Adamw => Box::new(AdamW::new(cfg.adamw)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.adamw.lr }),
    }
}

fn stack<'a, T: Scalar>(items: impl Iterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let v: Vec<&Tensor<T>> = items.collect();
    Tensor::stack(&v)
}

/// One pass over `train` in shuffled mini-batches (last short batch kept).
/// Returns the sample-weighted mean batch loss.
pub fn train_epoch<T: Scalar, M: Segmenter<T>>(
    model: &mut M,
    opt: &mut dyn Optimizer<T>,
    train: &[Prepared<T>],
    batch_size: usize,
    cfg: &TrainConfig,
    shuffle: &mut Rng,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(shuffle);
    let mut weighted = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let images = stack(chunk.iter().map(|&i| &train[i].image))?;
        let targets = stack(chunk.iter().map(|&i| &train[i].target))?;
        let mut tape = Tape::new();
        let bind = model.params().bind(&mut tape);
        let x = tape.constant(images);
        let fwd = model.record(&mut tape, &bind, x, Mode::Train)?;
        let loss = tape.dice_loss(fwd.output, &targets, cfg.dice_smooth, cfg.reduction)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss is {value}")));
        }
        tape.backward(loss)?;
        model.params_mut().store_grads(&tape, &bind);
        model.apply_stats(fwd.updates);
        opt.step(model.params_mut())?;
        weighted += value * chunk.len() as f64;
    }
    Ok(weighted / train.len() as f64)
}

/// Eval-mode mean per-sample Dice loss over `samples`.
pub fn eval_loss<T: Scalar, M: Segmenter<T>>(
    model: &M,
    samples: &[Prepared<T>],
    smooth: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(8) {
        let probs = model.predict(&stack(chunk.iter().map(|p| &p.image))?)?;
        let targets = stack(chunk.iter().map(|p| &p.target))?;
        let mut tape = Tape::new();
        let pred = tape.constant(probs);
        let loss = tape.dice_loss(pred, &targets, smooth, DiceReduction::PerSampleMean)?;
        total += tape.value(loss).item().as_f64() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains for global epochs `epochs`, appending one log entry per epoch.
#[allow(clippy::too_many_arguments)]
fn local_epochs<T: Scalar, M: Segmenter<T>>(
    model: &mut M,
    opt: &mut dyn Optimizer<T>,
    data: &ClientData<T>,
    epochs: std::ops::Range<usize>,
    round: usize,
    plan: &RoundPlan,
    cfg: &TrainConfig,
    seed: u64,
    logs: &mut Vec<EpochLog>,
) -> Result<()> {
    let key = data.stream_key();
    for epoch in epochs {
        let fail = |e: Error| Error::ClientFailure {
            client: data.label(),
            epoch,
            reason: e.to_string(),
        };
        let mut shuffle = rng::stream(seed, &[rng::tag::SHUFFLE, key, epoch as u64]);
        let train_loss = train_epoch(model, opt, &data.train, plan.batch_size, cfg, &mut shuffle)
            .map_err(fail)?;
        let val_loss = if data.val.is_empty() {
            f64::NAN
        } else {
            eval_loss(model, &data.val, cfg.dice_smooth).map_err(fail)?
        };
        log::debug!(
            "client {:?} epoch {epoch}: train {train_loss:.4} val {val_loss:.4}",
            data.client
        );
        logs.push(EpochLog {
            client: data.client,
            epoch,
            round,
            train_loss,
            val_loss,
        });
    }
    Ok(())
}

/// Local learning: `plan.total_epochs` epochs on one client's data.
pub fn run_ll<T: Scalar, M: Segmenter<T>>(
    init: &M,
    data: &ClientData<T>,
    plan: &RoundPlan,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(M, Vec<EpochLog>)> {
    plan.validate()?;
    let mut model = init.clone();
    let mut opt = optimizer::<T>(cfg);
    let mut logs = Vec::with_capacity(plan.total_epochs);
    local_epochs(
        &mut model,
        opt.as_mut(),
        data,
        0..plan.total_epochs,
        0,
        plan,
        cfg,
        seed,
        &mut logs,
    )?;
    Ok((model, logs))
}

/// Centralized learning on pooled data; the trainer is the one used for LL.
pub fn run_cl<T: Scalar, M: Segmenter<T>>(
    init: &M,
    pooled: &ClientData<T>,
    plan: &RoundPlan,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(M, Vec<EpochLog>)> {
    run_ll(init, pooled, plan, cfg, seed)
}

#[derive(Clone, Debug)]
pub struct FlOutcome<M> {
    pub global: M,
    pub logs: Vec<EpochLog>,
    /// Global parameter fingerprints after each aggregation.
    pub round_fingerprints: Vec<u64>,
}

/// Federated learning: per round, broadcast, local training, FedAvg weighted by training-set size.
pub fn run_fl<T: Scalar, M: Segmenter<T>>(
    init: &M,
    clients: &[ClientData<T>],
    plan: &RoundPlan,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FlOutcome<M>> {
    plan.validate()?;
    if clients.is_empty() {
        return Err(Error::Config(
            "federated training needs at least one participant".into(),
        ));
    }
    let mut global = init.clone();
    let mut optimizers: Vec<Box<dyn Optimizer<T>>> =
        clients.iter().map(|_| optimizer::<T>(cfg)).collect();
    let weights: Vec<f64> = clients.iter().map(|c| c.train.len() as f64).collect();
    let mut logs = Vec::with_capacity(clients.len() * plan.total_epochs);
    let mut round_fingerprints = Vec::with_capacity(plan.rounds);
    for round in 0..plan.rounds {
        let epochs = round * plan.epochs_per_round..(round + 1) * plan.epochs_per_round;
        if cfg.reset_optimizer {
            optimizers.iter_mut().for_each(|o| o.reset());
        }
        let train_one = |(data, opt): (&ClientData<T>, &mut Box<dyn Optimizer<T>>)| -> Result<(M, Vec<EpochLog>)> {
            let mut replica = global.clone();
            let mut client_logs = Vec::with_capacity(plan.epochs_per_round);
            local_epochs(
                &mut replica,
                opt.as_mut(),
                data,
                epochs.clone(),
                round,
                plan,
                cfg,
                seed,
                &mut client_logs,
            )?;
            Ok((replica, client_logs))
        };
        let results: Vec<Result<(M, Vec<EpochLog>)>> = if cfg.parallel_clients {
            clients
                .par_iter()
                .zip(optimizers.par_iter_mut())
                .map(train_one)
                .collect()
        } else {
            clients
                .iter()
                .zip(optimizers.iter_mut())
                .map(train_one)
                .collect()
        };
        let mut states = Vec::with_capacity(clients.len());
        for r in results {
            let (replica, client_logs) = r?;
            states.push(replica.params().state_dict());
            logs.extend(client_logs);
        }
        let merged = fedavg(&states, &weights)?;
        global.params_mut().load_state_dict(&merged)?;
        round_fingerprints.push(global.params().fingerprint());
    }
    Ok(FlOutcome {
        global,
        logs,
        round_fingerprints,
    })
}
