use serde::{Deserialize, Serialize};

use super::{ConvIdx, Forward, Segmenter};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Binding, Mode, ParamStore, Shape, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlainConfig {
    pub in_channels: usize,
    pub hidden: usize,
}

impl Default for PlainConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            hidden: 4,
        }
    }
}

/// Two 3x3 convolutions with ReLU and a 1x1 sigmoid head; no normalisation,
/// so per-sample losses are independent of batch composition.
#[derive(Clone, Debug)]
pub struct PlainConvNet<T> {
    config: PlainConfig,
    params: ParamStore<T>,
    layers: [ConvIdx; 3],
}

impl<T: Scalar> PlainConvNet<T> {
    pub fn new(config: PlainConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut store = ParamStore::new();
        let c = config.hidden;
        let layers = [
            ConvIdx::register(
                &mut store,
                &mut rng,
                "conv1",
                c,
                config.in_channels,
                3,
                true,
            )?,
            ConvIdx::register(&mut store, &mut rng, "conv2", c, c, 3, true)?,
            ConvIdx::register(&mut store, &mut rng, "head", 1, c, 1, true)?,
        ];
        Ok(Self {
            config,
            params: store,
            layers,
        })
    }
}

impl<T: Scalar> Segmenter<T> for PlainConvNet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.config.in_channels || shape.plane() == 0 {
            return Err(Error::Dimension(format!(
                "plain network cannot take input {shape}"
            )));
        }
        Ok(())
    }

    fn record(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        input: Var,
        _mode: Mode,
    ) -> Result<Forward<T>> {
        self.check_input(tape.shape(input))?;
        let h = self.layers[0].apply(tape, bind, input)?;
        let h = tape.relu(h)?;
        let h = self.layers[1].apply(tape, bind, h)?;
        let h = tape.relu(h)?;
        let h = self.layers[2].apply(tape, bind, h)?;
        Ok(Forward {
            output: tape.sigmoid(h)?,
            updates: Vec::new(),
        })
    }
}
