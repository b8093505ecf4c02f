use super::{Builder, Ctx, Mode, Result};
use crate::tensor::{Scalar, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-initialised convolution, stride 1, "same" padding for odd kernels.
    pub(crate) fn build<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build_scaled(b, name, cin, cout, kernel, bias, 1.0)
    }

    /// As [`Conv2d::build`] with the He standard deviation multiplied by `gain`.
    pub(crate) fn build_scaled<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let fan_in = (cin * kernel * kernel) as f64;
        b.gaussian(&weight, &[cout, cin, kernel, kernel], gain * (2.0 / fan_in).sqrt())?;
        let bias = if bias {
            let n = format!("{name}.bias");
            b.constant(&n, &[cout], 0.0)?;
            Some(n)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| ctx.param(n)).transpose()?;
        Ok(ctx.tape.conv2d(x, w, b, 1, self.padding)?)
    }
}

/// Parametric ReLU with a learnable slope per channel.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: String,
}

impl PRelu {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        let slope = format!("{name}.slope");
        b.constant(&slope, &[channels], PRELU_INIT)?;
        Ok(Self { slope })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.param(&self.slope)?;
        Ok(ctx.tape.prelu(x, s)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub eps: f64,
}

impl BatchNorm {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        b.constant(&format!("{name}.gamma"), &[channels], 1.0)?;
        b.constant(&format!("{name}.beta"), &[channels], 0.0)?;
        b.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?;
        b.buffer(&format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(Self {
            name: name.to_string(),
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        match ctx.mode {
            Mode::Train => Ok(ctx.tape.batch_norm(&self.name, x, gamma, beta, self.eps)?),
            Mode::Eval => {
                let mean = ctx.buffer(&format!("{}.running_mean", self.name))?;
                let var = ctx.buffer(&format!("{}.running_var", self.name))?;
                Ok(ctx.tape.batch_norm_eval(x, gamma, beta, mean, var, self.eps)?)
            }
        }
    }
}
