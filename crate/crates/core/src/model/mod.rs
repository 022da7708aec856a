//! Segmentation networks built on the tensor tape.

mod plain;
mod unet;

pub use plain::{PlainConfig, PlainConvNet};
pub use unet::{attention_gate, AttentionUNet, GateParams, UNetConfig};

use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{
    BatchNormStats, Binding, Mode, ParamKind, ParamStore, Shape, Tape, Tensor, Var,
};

/// Running-statistics update for one BatchNorm layer, keyed by store index.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: usize,
    pub var: usize,
    pub stats: BatchNormStats<T>,
}

/// Result of recording a forward pass on a tape.
pub struct Forward<T> {
    /// Per-pixel probabilities.
    pub output: Var,
    pub updates: Vec<StatUpdate<T>>,
}

/// A model mapping `(N, in, H, W)` images to `(N, 1, H, W)` probabilities.
pub trait Segmenter<T: Scalar>: Clone + Send + Sync {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Rejects inputs the architecture cannot process.
    fn check_input(&self, shape: Shape) -> Result<()>;

    /// Records the forward pass on `tape` using the parameter leaves in `bind`.
    fn record(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        input: Var,
        mode: Mode,
    ) -> Result<Forward<T>>;

    fn apply_stats(&mut self, updates: Vec<StatUpdate<T>>) {
        let params = self.params_mut();
        for u in updates {
            params
                .get_mut(u.mean)
                .value
                .data_mut()
                .copy_from_slice(&u.stats.mean);
            params
                .get_mut(u.var)
                .value
                .data_mut()
                .copy_from_slice(&u.stats.var);
        }
    }

    /// Eval-mode inference; never changes the model.
    fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let bind = self.params().bind(&mut tape);
        let x = tape.constant(batch.clone());
        let fwd = self.record(&mut tape, &bind, x, Mode::Eval)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Forward pass; in train mode BatchNorm running statistics are updated.
    fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            return self.predict(batch);
        }
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let bind = self.params().bind(&mut tape);
        let x = tape.constant(batch.clone());
        let fwd = self.record(&mut tape, &bind, x, mode)?;
        let out = tape.value(fwd.output).clone();
        self.apply_stats(fwd.updates);
        Ok(out)
    }
}

/// He-uniform initialised convolution weight, bound `sqrt(6 / fan_in)`.
pub(crate) fn he_uniform<T: Scalar>(shape: Shape, rng: &mut Rng) -> Tensor<T> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Index handles of a convolution with optional bias.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIdx {
    pub weight: usize,
    pub bias: Option<usize>,
    pub pad: usize,
}

impl ConvIdx {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            he_uniform(Shape::new(cout, cin, k, k), rng),
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(store.register(
                format!("{name}.bias"),
                Tensor::zeros(Shape::channels(cout)),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            pad: k / 2,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bind.var(self.weight),
            self.bias.map(|b| bind.var(b)),
            1,
            self.pad,
        )
    }
}

/// Index handles of a BatchNorm layer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BnIdx {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl BnIdx {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        let s = Shape::channels(c);
        Ok(Self {
            gamma: store.register(
                format!("{name}.gamma"),
                Tensor::ones(s),
                ParamKind::Trainable,
            )?,
            beta: store.register(
                format!("{name}.beta"),
                Tensor::zeros(s),
                ParamKind::Trainable,
            )?,
            mean: store.register(
                format!("{name}.running_mean"),
                Tensor::zeros(s),
                ParamKind::Buffer,
            )?,
            var: store.register(
                format!("{name}.running_var"),
                Tensor::ones(s),
                ParamKind::Buffer,
            )?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        params: &ParamStore<T>,
        x: Var,
        mode: Mode,
        momentum: f64,
        eps: f64,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let (y, stats) = tape.batchnorm2d(
            x,
            bind.var(self.gamma),
            bind.var(self.beta),
            params.get(self.mean).value.data(),
            params.get(self.var).value.data(),
            mode,
            momentum,
            eps,
        )?;
        if let Some(stats) = stats {
            updates.push(StatUpdate {
                mean: self.mean,
                var: self.var,
                stats,
            });
        }
        Ok(y)
    }
}
