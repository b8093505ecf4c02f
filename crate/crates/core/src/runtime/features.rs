use std::fmt;
use std::str::FromStr;

use super::infer::pad_to_square;
use super::{Result, RuntimeError};
use crate::data::{to_float, ImageBuffer};
use crate::nn::{Mhcnn, Mode};
use crate::tensor::{Tape, Tensor};

/// Pixels of black between tiles.
const GAP: usize = 1;

/// An intermediate the model exposes for visual inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStage {
    /// Output of the given head's path block, in that head's rotated frame.
    Head(usize),
    /// Fused multi-path attention output.
    MpaOut,
}

impl FromStr for FeatureStage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "mpa_out" {
            return Ok(Self::MpaOut);
        }
        s.strip_prefix("head")
            .and_then(|n| n.parse().ok())
            .map(Self::Head)
            .ok_or_else(|| format!("unknown feature stage `{s}`"))
    }
}

impl fmt::Display for FeatureStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Head(i) => write!(f, "head{i}"),
            Self::MpaOut => f.write_str("mpa_out"),
        }
    }
}

/// Runs `image` through the model and tiles every channel of `stage` into
/// one grayscale image. Each channel is min-max normalized on its own; a
/// constant channel becomes a mid-gray tile.
pub fn dump_features(model: &Mhcnn<f32>, image: &ImageBuffer, stage: FeatureStage) -> Result<ImageBuffer> {
    let heads = model.config().heads;
    if let FeatureStage::Head(i) = stage {
        if i >= heads {
            return Err(RuntimeError::UnknownStage(stage.to_string(), heads - 1));
        }
    }
    if image.channels() != model.config().in_channels {
        return Err(RuntimeError::Config(format!(
            "model expects {}-channel images, got {}",
            model.config().in_channels,
            image.channels()
        )));
    }
    let padded = pad_to_square(&to_float(image))?;
    let (c, side) = (padded.shape()[0], padded.shape()[1]);
    let mut tape = Tape::new();
    let x = tape.constant(padded.reshape(&[1, c, side, side])?);
    let taps = model.forward_taps(&mut tape, &model.store.params, x, Mode::Eval)?;
    let var = match stage {
        FeatureStage::Head(i) => taps.heads[i],
        FeatureStage::MpaOut => taps.mpa,
    };
    Ok(tile(tape.value(var)))
}

/// Lays out the channels of a `(1, n, s, s)` tensor on a near-square grid.
fn tile(t: &Tensor<f32>) -> ImageBuffer {
    let (n, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h + (rows - 1) * GAP, cols * w + (cols - 1) * GAP);
    let mut px = vec![0u8; gh * gw];
    for (ch, plane) in t.data().chunks_exact(h * w).enumerate() {
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let (oy, ox) = ((ch / cols) * (h + GAP), (ch % cols) * (w + GAP));
        for y in 0..h {
            for x in 0..w {
                let v = if range > 0.0 {
                    (((plane[y * w + x] - lo) / range) * 255.0).round() as u8
                } else {
                    128
                };
                px[(oy + y) * gw + ox + x] = v;
            }
        }
    }
    ImageBuffer::new(gh, gw, 1, px).expect("tile grid dimensions")
}

/// Number of tiles a stage produces: the channel count of that tensor.
pub fn tiles_in(grid: &ImageBuffer, tile_side: usize) -> usize {
    let per = |len: usize| (len + GAP) / (tile_side + GAP);
    per(grid.height()) * per(grid.width())
}
