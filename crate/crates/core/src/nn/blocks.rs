use super::layers::{BatchNorm, Conv2d, PRelu};
use super::{Builder, Ctx, NnError, Result};
use crate::tensor::{Scalar, Var};

/// Three densely connected conv+PReLU stages followed by conv+BN+ReLU compression.
///
/// Stage `i` sees the block input concatenated with every earlier stage output,
/// so the stage inputs are `c, 2c, 3c` channels and the compression sees `4c`.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub width: usize,
    stages: Vec<(Conv2d, PRelu)>,
    compress: Conv2d,
    bn: BatchNorm,
}

impl DenseBlock {
    pub const STAGES: usize = 3;

    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize) -> Result<Self> {
        let stages = (0..Self::STAGES)
            .map(|i| {
                let conv = Conv2d::build(b, &format!("{name}.stage{i}.conv"), (i + 1) * width, width, 3, true)?;
                let act = PRelu::build(b, &format!("{name}.stage{i}.prelu"), width)?;
                Ok((conv, act))
            })
            .collect::<Result<Vec<_>>>()?;
        // Bias would be cancelled by the batch norm that follows.
        let compress = Conv2d::build(b, &format!("{name}.compress"), (Self::STAGES + 1) * width, width, 3, false)?;
        let bn = BatchNorm::build(b, &format!("{name}.bn"), width)?;
        Ok(Self {
            width,
            stages,
            compress,
            bn,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.width, "dense block")?;
        let mut features = vec![x];
        for (conv, act) in &self.stages {
            let input = if features.len() == 1 {
                x
            } else {
                ctx.tape.concat(&features, 1)?
            };
            let y = conv.forward(ctx, input)?;
            features.push(act.forward(ctx, y)?);
        }
        let all = ctx.tape.concat(&features, 1)?;
        let y = self.compress.forward(ctx, all)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y)?)
    }
}

/// Per-head feature extractor: a 1×1 lift to `width` channels and two dense blocks.
#[derive(Clone, Debug)]
pub struct PathBlock {
    entry: Conv2d,
    blocks: [DenseBlock; 2],
}

impl PathBlock {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, name: &str, in_channels: usize, width: usize) -> Result<Self> {
        let entry = Conv2d::build(b, &format!("{name}.entry"), in_channels, width, 1, true)?;
        let blocks = [
            DenseBlock::build(b, &format!("{name}.block0"), width)?,
            DenseBlock::build(b, &format!("{name}.block1"), width)?,
        ];
        Ok(Self { entry, blocks })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        expect_channels(ctx, image, self.entry.cin, "path block")?;
        let mut y = self.entry.forward(ctx, image)?;
        for block in &self.blocks {
            y = block.forward(ctx, y)?;
        }
        Ok(y)
    }
}

/// Four dense blocks and a final 3×3 conv producing the estimated noise.
#[derive(Clone, Debug)]
pub struct TailBlock {
    blocks: Vec<DenseBlock>,
    pub out: Conv2d,
}

impl TailBlock {
    pub const BLOCKS: usize = 4;
    /// Init gain of the final conv. A full He scale makes the initial noise
    /// estimate about ten times larger than σ = 25 noise, and training then
    /// spends its budget shrinking it.
    pub const OUT_INIT_GAIN: f64 = 0.1;

    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize, out_channels: usize) -> Result<Self> {
        let blocks = (0..Self::BLOCKS)
            .map(|i| DenseBlock::build(b, &format!("{name}.block{i}"), channels))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::build_scaled(b, &format!("{name}.out"), channels, out_channels, 3, true, Self::OUT_INIT_GAIN)?;
        Ok(Self { blocks, out })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, noise_maps: Var) -> Result<Var> {
        expect_channels(ctx, noise_maps, self.out.cin, "tail")?;
        let mut y = noise_maps;
        for block in &self.blocks {
            y = block.forward(ctx, y)?;
        }
        self.out.forward(ctx, y)
    }
}

pub(crate) fn expect_channels<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, channels: usize, what: &str) -> Result<()> {
    let shape = ctx.tape.value(x).shape();
    if shape.len() != 4 || shape[1] != channels {
        return Err(NnError::Input(format!(
            "{what} expects (b, {channels}, h, w), got {shape:?}"
        )));
    }
    Ok(())
}
