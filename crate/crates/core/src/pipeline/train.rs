use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_dataset, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{record_forward, ModelConfig, StegoModelParams};
use crate::numerics::{Tape, Tensor, Var};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// RNG stream for batch order, distinct from the init and dataset shuffles.
const BATCH_STREAM: u64 = 1;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: StegoModelParams,
    /// Loss of every step, measured before that step's update.
    pub loss_log: Vec<f32>,
}

/// Adam over the full parameter set, one mini-batch per [`Trainer::step`].
pub struct Trainer {
    params: StegoModelParams,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    lr: f32,
    data: Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    steps: usize,
}

impl Trainer {
    pub fn new(config: ModelConfig, seed: u64, learning_rate: f32, batch_size: usize, data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("no training pairs".into()));
        }
        if batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        let params = StegoModelParams::init(seed, config);
        let zeros: Vec<Vec<f32>> = params.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Ok(Trainer {
            params,
            m: zeros.clone(),
            v: zeros,
            lr: learning_rate,
            batch_size: batch_size.min(data.len()),
            data,
            rng,
            order: Vec::new(),
            cursor: 0,
            steps: 0,
        })
    }

    pub fn params(&self) -> &StegoModelParams {
        &self.params
    }

    pub fn into_params(self) -> StegoModelParams {
        self.params
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Indices of the next batch. A new epoch reshuffles; a short tail is
    /// left for the following epoch's permutation.
    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        batch
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn step(&mut self) -> Result<f32> {
        let batch = self.next_batch();
        self.steps += 1;
        let cover = Tensor::stack(&batch.iter().map(|&i| &self.data.covers[i]).collect::<Vec<_>>())?;
        let secret = Tensor::stack(&batch.iter().map(|&i| &self.data.secrets[i]).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let (c, s) = (tape.constant(cover), tape.constant(secret));
        let pass = record_forward(&mut tape, &bound, c, s)?;
        let loss = tape.scalar(pass.loss);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                value: loss,
            });
        }
        let mut vars: Vec<Var> = Vec::new();
        let _ = bound.map(&mut |_, v| vars.push(*v));
        let grads = tape.backward(pass.loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v, &tape)).collect::<Result<_>>()?;
        drop(tape);

        let t = self.steps as i32;
        let c1 = (1.0 - ADAM_BETA1.powi(t)) as f32;
        let c2 = (1.0 - ADAM_BETA2.powi(t)) as f32;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let lr = self.lr;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        self.params.for_each_mut(&mut |_, p| {
            let (m, v, g) = (&mut ms[k], &mut vs[k], grads[k].data());
            for (((w, m), v), &g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            k += 1;
        });
        Ok(loss)
    }
}

/// Load the configured folder and train on its non-held-out pairs.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_dataset(&config.data_dir, config.image_size, config.seed)?;
    train_on(config, data.subset(data.train_indices()))
}

/// Train on exactly the pairs given.
pub fn train_on(config: &TrainConfig, data: Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mut trainer = Trainer::new(config.model_config(), config.seed, config.learning_rate, config.batch_size, data)?;
    let mut loss_log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let loss = trainer.step()?;
        if step == 1 || step % 25 == 0 || step == config.steps {
            log::info!("[{}] step {step}/{}: loss {loss:.5}", config.mode, config.steps);
        }
        loss_log.push(loss);
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        loss_log,
    })
}
