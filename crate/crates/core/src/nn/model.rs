use super::attention::{EcaLayer, MpaBlock};
use super::blocks::{expect_channels, PathBlock, TailBlock};
use super::layers::{Conv2d, BN_MOMENTUM};
use super::{Builder, Ctx, Mode, ModelConfig, NamedTensors, NnError, ParamStore, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Taps {
    /// One feature map per head, `(b, width, s, s)` each.
    pub heads: Vec<Var>,
    /// Fused features, `(b, heads·width, s, s)`.
    pub mpa: Var,
    /// Estimated noise, `(b, in_channels, s, s)`.
    pub noise: Var,
    pub output: Var,
}

/// The assembled denoiser: parameters plus the layer graph that reads them.
#[derive(Clone, Debug)]
pub struct Mhcnn<T: Scalar> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    heads: Vec<PathBlock>,
    mpa: MpaBlock,
    lift: Conv2d,
    eca: EcaLayer,
    tail: TailBlock,
}

impl<T: Scalar> Mhcnn<T> {
    /// Builds a freshly initialised model. Construction order is fixed, so the
    /// same config always yields bit-identical parameters.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::<T>::new(config.seed);
        let heads = (0..config.heads)
            .map(|i| PathBlock::build(&mut b, &format!("head{i}"), config.in_channels, config.width))
            .collect::<Result<Vec<_>>>()?;
        let mpa = MpaBlock::build(&mut b, "mpa", config.width, &config.angles, config.use_mpa)?;
        let fused = config.fused_channels();
        let lift = Conv2d::build(&mut b, "lift", config.in_channels, fused, 1, true)?;
        let eca = EcaLayer::build(&mut b, "eca", fused)?;
        let tail = TailBlock::build(&mut b, "tail", fused, config.in_channels)?;
        Ok(Self {
            config: config.clone(),
            store: b.store,
            heads,
            mpa,
            lift,
            eca,
            tail,
        })
    }

    /// Builds the layer graph for `config` and installs the given tensors,
    /// checking that names and shapes match exactly.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        check_same_layout("parameter", &model.store.params, &store.params)?;
        check_same_layout("buffer", &model.store.buffers, &store.buffers)?;
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn mpa(&self) -> &MpaBlock {
        &self.mpa
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Mhcnn<U> {
        Mhcnn {
            config: self.config.clone(),
            store: self.store.cast(),
            heads: self.heads.clone(),
            mpa: self.mpa.clone(),
            lift: self.lift.clone(),
            eca: self.eca.clone(),
            tail: self.tail.clone(),
        }
    }

    /// Zeroes the tail's final conv, turning the model into the identity map.
    pub fn zero_tail_output(&mut self) {
        let out = &self.tail.out;
        for name in std::iter::once(&out.weight).chain(out.bias.as_ref()) {
            if let Some(t) = self.store.params.get_mut(name) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_taps(tape, &self.store.params, input, mode)?.output)
    }

    /// Full pass with explicit parameter values (the model's buffers are used as-is).
    pub fn forward_taps(
        &self,
        tape: &mut Tape<T>,
        params: &NamedTensors<T>,
        input: Var,
        mode: Mode,
    ) -> Result<Taps> {
        let mut ctx = Ctx {
            tape,
            params,
            buffers: &self.store.buffers,
            mode,
        };
        self.run(&mut ctx, input)
    }

    fn run(&self, ctx: &mut Ctx<'_, T>, input: Var) -> Result<Taps> {
        expect_channels(ctx, input, self.config.in_channels, "model")?;
        let shape = ctx.tape.value(input).shape();
        if shape[2] != shape[3] {
            return Err(NnError::Input(format!(
                "model needs square input, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for (head, &k) in self.heads.iter().zip(&self.config.angles) {
            let view = if k == 0 {
                input
            } else {
                ctx.tape.rotate90k(input, k as i32)?
            };
            heads.push(head.forward(ctx, view)?);
        }
        let fused = self.mpa.forward(ctx, &heads)?;
        let lifted = self.lift.forward(ctx, input)?;
        let noise_maps = ctx.tape.sub(lifted, fused)?;
        let attended = self.eca.forward(ctx, noise_maps)?;
        let noise = self.tail.forward(ctx, attended)?;
        let output = ctx.tape.sub(input, noise)?;
        Ok(Taps {
            heads,
            mpa: fused,
            noise,
            output,
        })
    }

    /// Folds the batch statistics recorded on `tape` into running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) -> Result<()> {
        self.store.absorb_batch_stats(tape, BN_MOMENTUM)
    }
}

fn check_same_layout<T: Scalar>(what: &str, expected: &NamedTensors<T>, got: &NamedTensors<T>) -> Result<()> {
    for (name, t) in expected {
        match got.get(name) {
            None => return Err(NnError::Missing(name.clone())),
            Some(g) if g.shape() != t.shape() => {
                return Err(NnError::Config(format!(
                    "{what} `{name}` has shape {:?}, expected {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = got.keys().find(|k| !expected.contains_key(*k)) {
        return Err(NnError::Config(format!("unexpected {what} `{extra}`")));
    }
    Ok(())
}
