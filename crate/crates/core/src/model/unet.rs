use serde::{Deserialize, Serialize};

use super::{BnIdx, ConvIdx, Forward, Segmenter, StatUpdate};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Binding, Mode, ParamStore, Shape, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Encoder depth; the input is pooled `levels - 1` times.
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Attention-gate channel reduction factor.
    pub reduction: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            in_channels: 1,
            out_channels: 1,
            reduction: 8,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "levels must be at least 2, got {}",
                self.levels
            )));
        }
        if self.reduction == 0 || self.base_channels < self.reduction {
            return Err(Error::Config(format!(
                "base_channels ({}) must be at least the reduction factor ({})",
                self.base_channels, self.reduction
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config(
                "bn_momentum must lie in [0, 1] and bn_eps be positive".into(),
            ));
        }
        if self.levels > 16 {
            return Err(Error::Config(format!(
                "levels = {} is unreasonably deep",
                self.levels
            )));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of the gate's reduced representation for skip width `c`.
    pub fn gate_width(&self, c: usize) -> usize {
        (2 * c / self.reduction).max(1)
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Dimension(format!(
                "input {h}x{w} is not divisible by {d} (levels = {})",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Tape variables of one attention gate.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub reduce_weight: Var,
    pub reduce_bias: Var,
    pub restore_weight: Var,
    pub restore_bias: Var,
}

/// Attention gate: weights `w = sigmoid(restore(sigmoid(reduce(concat(skip, gate)))))`
/// in (0,1), returns `(skip * w, w)`.
pub fn attention_gate<T: Scalar>(
    tape: &mut Tape<T>,
    skip: Var,
    gate: Var,
    p: GateParams,
) -> Result<(Var, Var)> {
    let (s, g) = (tape.shape(skip), tape.shape(gate));
    if (s.n, s.h, s.w) != (g.n, g.h, g.w) {
        return Err(Error::Dimension(format!(
            "attention gate: skip {s} and gate {g} are not aligned"
        )));
    }
    if s.c != g.c {
        return Err(Error::Dimension(format!(
            "attention gate: skip has {} channels, gate has {}",
            s.c, g.c
        )));
    }
    let cat = tape.concat_channels(skip, gate)?;
    let r = tape.conv2d(cat, p.reduce_weight, Some(p.reduce_bias), 1, 0)?;
    let r = tape.sigmoid(r)?;
    let w = tape.conv2d(r, p.restore_weight, Some(p.restore_bias), 1, 0)?;
    let w = tape.sigmoid(w)?;
    Ok((tape.mul(skip, w)?, w))
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: ConvIdx,
    bn: BnIdx,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    a: ConvBn,
    b: ConvBn,
}

#[derive(Clone, Copy, Debug)]
struct Gate {
    reduce: ConvIdx,
    restore: ConvIdx,
}

#[derive(Clone, Copy, Debug)]
struct Decoder {
    proj: ConvBn,
    gate: Gate,
    block: Block,
}

/// Attention U-Net for binary segmentation.
#[derive(Clone, Debug)]
pub struct AttentionUNet<T> {
    config: UNetConfig,
    params: ParamStore<T>,
    encoders: Vec<Block>,
    /// `decoders[i]` produces level `i`.
    decoders: Vec<Decoder>,
    head: ConvIdx,
}

fn conv_bn<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    conv: &str,
    bn: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<ConvBn> {
    Ok(ConvBn {
        conv: ConvIdx::register(store, rng, conv, cout, cin, k, false)?,
        bn: BnIdx::register(store, bn, cout)?,
    })
}

fn block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    cout: usize,
    cin: usize,
) -> Result<Block> {
    Ok(Block {
        a: conv_bn(
            store,
            rng,
            &format!("{prefix}.conv1"),
            &format!("{prefix}.bn1"),
            cout,
            cin,
            3,
        )?,
        b: conv_bn(
            store,
            rng,
            &format!("{prefix}.conv2"),
            &format!("{prefix}.bn2"),
            cout,
            cout,
            3,
        )?,
    })
}

impl<T: Scalar> AttentionUNet<T> {
    /// Builds the network with seeded He-uniform weights.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut store = ParamStore::new();
        let levels = config.levels;
        let mut encoders = Vec::with_capacity(levels);
        for i in 0..levels {
            let cin = if i == 0 {
                config.in_channels
            } else {
                config.channels(i - 1)
            };
            encoders.push(block(
                &mut store,
                &mut rng,
                &format!("enc{i}"),
                config.channels(i),
                cin,
            )?);
        }
        let mut decoders = Vec::with_capacity(levels - 1);
        for i in 0..levels - 1 {
            let c = config.channels(i);
            let p = format!("dec{i}");
            let proj = conv_bn(
                &mut store,
                &mut rng,
                &format!("{p}.proj"),
                &format!("{p}.proj_bn"),
                c,
                config.channels(i + 1),
                1,
            )?;
            let mid = config.gate_width(c);
            let gate = Gate {
                reduce: ConvIdx::register(
                    &mut store,
                    &mut rng,
                    &format!("{p}.gate.reduce"),
                    mid,
                    2 * c,
                    1,
                    true,
                )?,
                restore: ConvIdx::register(
                    &mut store,
                    &mut rng,
                    &format!("{p}.gate.restore"),
                    c,
                    mid,
                    1,
                    true,
                )?,
            };
            let block = block(&mut store, &mut rng, &p, c, 2 * c)?;
            decoders.push(Decoder { proj, gate, block });
        }
        let head = ConvIdx::register(
            &mut store,
            &mut rng,
            "head",
            config.out_channels,
            config.channels(0),
            1,
            true,
        )?;
        Ok(Self {
            config,
            params: store,
            encoders,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Eval-mode attention weights of every gate, from the finest level up.
    pub fn gate_maps(
        &self,
        batch: &crate::tensor::Tensor<T>,
    ) -> Result<Vec<crate::tensor::Tensor<T>>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let mut gates = Vec::new();
        self.graph(&mut tape, &bind, x, Mode::Eval, &mut Vec::new(), &mut gates)?;
        Ok(gates.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        layer: ConvBn,
        x: Var,
        mode: Mode,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let y = layer.conv.apply(tape, bind, x)?;
        let y = layer.bn.apply(
            tape,
            bind,
            &self.params,
            y,
            mode,
            self.config.bn_momentum,
            self.config.bn_eps,
            updates,
        )?;
        tape.relu(y)
    }

    fn graph(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        input: Var,
        mode: Mode,
        updates: &mut Vec<StatUpdate<T>>,
        gates: &mut Vec<Var>,
    ) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = input;
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 {
                h = tape.max_pool2d(h, 2, 2)?;
            }
            h = self.conv_bn_relu(tape, bind, enc.a, h, mode, updates)?;
            h = self.conv_bn_relu(tape, bind, enc.b, h, mode, updates)?;
            skips.push(h);
        }
        for i in (0..self.decoders.len()).rev() {
            let dec = self.decoders[i];
            let up = tape.upsample2x(h)?;
            let up = self.conv_bn_relu(tape, bind, dec.proj, up, mode, updates)?;
            let params = GateParams {
                reduce_weight: bind.var(dec.gate.reduce.weight),
                reduce_bias: bind.var(dec.gate.reduce.bias.expect("gate convs carry a bias")),
                restore_weight: bind.var(dec.gate.restore.weight),
                restore_bias: bind.var(dec.gate.restore.bias.expect("gate convs carry a bias")),
            };
            let (gated, w) = attention_gate(tape, skips[i], up, params)?;
            gates.push(w);
            let cat = tape.concat_channels(gated, up)?;
            h = self.conv_bn_relu(tape, bind, dec.block.a, cat, mode, updates)?;
            h = self.conv_bn_relu(tape, bind, dec.block.b, h, mode, updates)?;
        }
        gates.reverse();
        let logits = self.head.apply(tape, bind, h)?;
        tape.sigmoid(logits)
    }
}

impl<T: Scalar> Segmenter<T> for AttentionUNet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels, shape.c
            )));
        }
        self.config.check_dims(shape.h, shape.w)
    }

    fn record(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        input: Var,
        mode: Mode,
    ) -> Result<Forward<T>> {
        self.check_input(tape.shape(input))?;
        let mut updates = Vec::new();
        let output = self.graph(tape, bind, input, mode, &mut updates, &mut Vec::new())?;
        Ok(Forward { output, updates })
    }
}
