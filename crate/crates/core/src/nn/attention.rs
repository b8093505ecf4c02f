use super::blocks::expect_channels;
use super::layers::Conv2d;
use super::{Builder, Ctx, NnError, Result};
use crate::tensor::{Scalar, Var};

pub const IN_EPS: f64 = 1e-5;

/// Multi-path attention: projects each rotated head's features onto the
/// unrotated stream, then fuses the concatenation with a 1×1 conv.
///
/// For a rotated stream `r` with `a = proj_x(x)` and `q = proj_r(r)`:
///
/// ```text
/// M = IN( a(b,h,c,w) × q(b,h,w,c) )        (b,h,c,c)
/// P = IN( M × a(b,h,c,w) )                 (b,h,c,w)
/// r_p = P viewed back as (b,c,h,w)
/// ```
///
/// The unrotated stream enters the concatenation as-is, after all projections.
/// With attention disabled, rotated streams are instead turned back into
/// registration and concatenated directly.
#[derive(Clone, Debug)]
pub struct MpaBlock {
    pub width: usize,
    pub heads: usize,
    x_proj: Option<Conv2d>,
    stream_proj: Vec<Conv2d>,
    pub fusion: Conv2d,
    /// Quarter turns applied to each head input; used to undo the rotation
    /// when attention is disabled.
    angles: Vec<u8>,
    use_attention: bool,
    pub eps: f64,
}

impl MpaBlock {
    pub(crate) fn build<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        width: usize,
        angles: &[u8],
        use_attention: bool,
    ) -> Result<Self> {
        let heads = angles.len();
        let (x_proj, stream_proj) = if use_attention && heads > 1 {
            let x = Conv2d::build(b, &format!("{name}.x_proj"), width, width, 1, true)?;
            let streams = (1..heads)
                .map(|i| Conv2d::build(b, &format!("{name}.stream{i}_proj"), width, width, 1, true))
                .collect::<Result<Vec<_>>>()?;
            (Some(x), streams)
        } else {
            (None, Vec::new())
        };
        let fused = heads * width;
        let fusion = Conv2d::build(b, &format!("{name}.fusion"), fused, fused, 1, true)?;
        Ok(Self {
            width,
            heads,
            x_proj,
            stream_proj,
            fusion,
            angles: angles.to_vec(),
            use_attention,
            eps: IN_EPS,
        })
    }

    pub fn uses_attention(&self) -> bool {
        self.use_attention
    }

    fn check_streams<T: Scalar>(&self, ctx: &Ctx<'_, T>, streams: &[Var]) -> Result<()> {
        if streams.len() != self.heads {
            return Err(NnError::Input(format!(
                "expected {} streams, got {}",
                self.heads,
                streams.len()
            )));
        }
        let first = ctx.tape.value(streams[0]).shape().to_vec();
        expect_channels(ctx, streams[0], self.width, "MPA")?;
        if first[2] != first[3] {
            return Err(NnError::Input(format!(
                "MPA needs square feature maps, got {}x{}",
                first[2], first[3]
            )));
        }
        for &s in &streams[1..] {
            let shape = ctx.tape.value(s).shape();
            if shape != first.as_slice() {
                return Err(NnError::Input(format!(
                    "stream shapes differ: {first:?} vs {shape:?}"
                )));
            }
        }
        Ok(())
    }

    /// Projects `rotated` onto the space of the (already convolved) unrotated stream.
    fn project<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, a_bhcw: Var, q: Var) -> Result<Var> {
        let t = &mut *ctx.tape;
        let q_bhwc = t.permute(q, &[0, 2, 3, 1])?;
        let m = t.matmul(a_bhcw, q_bhwc)?;
        let m = t.instance_norm(m, self.eps)?;
        let p = t.matmul(m, a_bhcw)?;
        let p = t.instance_norm(p, self.eps)?;
        Ok(t.permute(p, &[0, 2, 1, 3])?)
    }

    /// The pre-fusion concatenation `[r1_p, r2_p, …, x]`.
    pub fn gather<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, streams: &[Var]) -> Result<Var> {
        self.check_streams(ctx, streams)?;
        let x = streams[0];
        let mut parts = Vec::with_capacity(self.heads);
        if self.use_attention {
            if let Some(x_proj) = &self.x_proj {
                let a = x_proj.forward(ctx, x)?;
                let a_bhcw = ctx.tape.permute(a, &[0, 2, 1, 3])?;
                for (proj, &r) in self.stream_proj.iter().zip(&streams[1..]) {
                    let q = proj.forward(ctx, r)?;
                    parts.push(self.project(ctx, a_bhcw, q)?);
                }
            }
        } else {
            for (&r, &k) in streams[1..].iter().zip(&self.angles[1..]) {
                parts.push(ctx.tape.rotate90k(r, -(k as i32))?);
            }
        }
        parts.push(x);
        Ok(ctx.tape.concat(&parts, 1)?)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, streams: &[Var]) -> Result<Var> {
        let gathered = self.gather(ctx, streams)?;
        self.fusion.forward(ctx, gathered)
    }
}

/// Adaptive 1-D kernel length for ECA (γ = 2, b = 1), always odd.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = (((channels as f64).log2() + 1.0) / 2.0).abs() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Efficient channel attention: global average pool, 1-D conv across
/// channels, sigmoid gate, per-channel rescale.
#[derive(Clone, Debug)]
pub struct EcaLayer {
    pub kernel: String,
    pub kernel_size: usize,
    pub channels: usize,
}

impl EcaLayer {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        let k = eca_kernel_size(channels);
        let kernel = format!("{name}.kernel");
        b.gaussian(&kernel, &[k], (2.0 / k as f64).sqrt())?;
        Ok(Self {
            kernel,
            kernel_size: k,
            channels,
        })
    }

    /// Per-channel gate values in `(0, 1)`, shape `(b, c)`.
    pub fn weights<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.channels, "ECA")?;
        let k = ctx.param(&self.kernel)?;
        let t = &mut *ctx.tape;
        let pooled = t.global_avg_pool(x)?;
        let mixed = t.channel_conv1d(pooled, k)?;
        Ok(t.sigmoid(mixed)?)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = self.weights(ctx, x)?;
        Ok(ctx.tape.channel_scale(x, w)?)
    }
}
