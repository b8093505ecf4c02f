use super::{add_awgn, to_float, DataError, ImageBuffer, NoiseSpec, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

/// Aligned clean/noisy training patches, each `(channels, p, p)` in float form.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    patch_size: usize,
    channels: usize,
    clean: Vec<Tensor<f32>>,
    noisy: Vec<Tensor<f32>>,
}

impl PatchSet {
    pub fn new(patch_size: usize, channels: usize, clean: Vec<Tensor<f32>>, noisy: Vec<Tensor<f32>>) -> Result<Self> {
        if clean.len() != noisy.len() {
            return Err(DataError::Invalid(format!(
                "{} clean patches but {} noisy",
                clean.len(),
                noisy.len()
            )));
        }
        let want = [channels, patch_size, patch_size];
        if let Some(bad) = clean.iter().chain(&noisy).find(|t| t.shape() != want) {
            return Err(DataError::Invalid(format!(
                "patch of shape {:?} in a set of {want:?} patches",
                bad.shape()
            )));
        }
        Ok(Self {
            patch_size,
            channels,
            clean,
            noisy,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn get(&self, i: usize) -> (&Tensor<f32>, &Tensor<f32>) {
        (&self.clean[i], &self.noisy[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor<f32>, &Tensor<f32>)> {
        self.clean.iter().zip(&self.noisy)
    }

    /// Applies [`augment`] to every pair, with per-patch seeds derived from `seed`.
    pub fn augmented(&self, seed: u64) -> Result<Self> {
        let (clean, noisy) = self
            .iter()
            .enumerate()
            .map(|(i, (c, n))| augment(c, n, derive_seed(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Self::new(self.patch_size, self.channels, clean, noisy)
    }

    /// Moves a seeded random `fraction` of the patches into a second set.
    /// A positive fraction of a set with two or more patches leaves at least
    /// one patch on each side.
    pub fn split_holdout(self, fraction: f64, seed: u64) -> (Self, Self) {
        let n = self.len();
        let held = match ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize {
            _ if n < 2 || fraction <= 0.0 => 0,
            h => h.clamp(1, n - 1),
        };
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(seed).shuffle(&mut order);
        let mut is_held = vec![false; n];
        for &i in &order[..held] {
            is_held[i] = true;
        }
        let (mut a, mut b) = (self.empty_like(), self.empty_like());
        for (i, (c, z)) in self.clean.into_iter().zip(self.noisy).enumerate() {
            let side = if is_held[i] { &mut b } else { &mut a };
            side.clean.push(c);
            side.noisy.push(z);
        }
        (a, b)
    }

    fn empty_like(&self) -> Self {
        Self {
            patch_size: self.patch_size,
            channels: self.channels,
            clean: Vec::new(),
            noisy: Vec::new(),
        }
    }
}

/// Top-left corners of the `patch × patch` windows on a `stride` grid.
pub fn grid_positions(height: usize, width: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
    if patch == 0 || stride == 0 || height < patch || width < patch {
        return Vec::new();
    }
    let ys = (0..=height - patch).step_by(stride);
    ys.flat_map(|y| (0..=width - patch).step_by(stride).map(move |x| (y, x)))
        .collect()
}

/// Window positions `(image, y, x)`: the stride grid over every image, then
/// uniformly random windows until `count` is reached. A `count` smaller than
/// the grid keeps a seeded random subset of it.
fn sample_windows(
    dims: &[(usize, usize)],
    patch: usize,
    stride: usize,
    count: Option<usize>,
    seed: u64,
) -> Result<Vec<(usize, usize, usize)>> {
    if patch == 0 || stride == 0 {
        return Err(DataError::Invalid("patch size and stride must be positive".into()));
    }
    if dims.is_empty() {
        return Err(DataError::Invalid("no images to cut patches from".into()));
    }
    for (i, &(h, w)) in dims.iter().enumerate() {
        if h < patch || w < patch {
            return Err(DataError::Invalid(format!(
                "image {i} is {h}x{w}, smaller than the {patch}x{patch} patch"
            )));
        }
    }
    let mut out: Vec<(usize, usize, usize)> = dims
        .iter()
        .enumerate()
        .flat_map(|(i, &(h, w))| grid_positions(h, w, patch, stride).into_iter().map(move |(y, x)| (i, y, x)))
        .collect();
    let mut rng = SplitMix64::new(seed);
    match count {
        Some(n) if n < out.len() => {
            rng.shuffle(&mut out);
            out.truncate(n);
        }
        Some(n) => {
            while out.len() < n {
                let i = rng.below(dims.len());
                let (h, w) = dims[i];
                out.push((i, rng.below(h - patch + 1), rng.below(w - patch + 1)));
            }
        }
        None => {}
    }
    Ok(out)
}

fn crop(img: &Tensor<f32>, y: usize, x: usize, patch: usize) -> Tensor<f32> {
    let (c, w) = (img.shape()[0], img.shape()[2]);
    let plane = img.shape()[1] * w;
    let mut data = Vec::with_capacity(c * patch * patch);
    for ch in 0..c {
        for r in y..y + patch {
            let start = ch * plane + r * w + x;
            data.extend_from_slice(&img.data()[start..start + patch]);
        }
    }
    Tensor::new(&[c, patch, patch], data).expect("crop shape")
}

fn common_channels<'a>(imgs: impl Iterator<Item = &'a ImageBuffer>) -> Result<usize> {
    let mut channels = None;
    for img in imgs {
        match channels {
            None => channels = Some(img.channels()),
            Some(c) if c != img.channels() => {
                return Err(DataError::Invalid("images mix gray and color".into()));
            }
            _ => {}
        }
    }
    channels.ok_or_else(|| DataError::Invalid("no images to cut patches from".into()))
}

/// Clean patches cut from `images`, each paired with its own AWGN draw.
///
/// Windows come from [`grid_positions`] at `stride`, topped up with random
/// windows (or subsampled) to `count`. Patch `i` is noised with
/// `derive_seed(noise.seed, i)`.
pub fn extract_patches(
    images: &[ImageBuffer],
    patch: usize,
    stride: usize,
    count: Option<usize>,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<PatchSet> {
    let channels = common_channels(images.iter())?;
    let dims: Vec<_> = images.iter().map(|m| (m.height(), m.width())).collect();
    let windows = sample_windows(&dims, patch, stride, count, seed)?;
    let floats: Vec<Tensor<f32>> = images.iter().map(to_float).collect();
    let mut clean = Vec::with_capacity(windows.len());
    let mut noisy = Vec::with_capacity(windows.len());
    for (k, &(i, y, x)) in windows.iter().enumerate() {
        let c = crop(&floats[i], y, x, patch);
        noisy.push(add_awgn(&c, &noise.with_seed(derive_seed(noise.seed, k as u64))));
        clean.push(c);
    }
    PatchSet::new(patch, channels, clean, noisy)
}

/// Same windows cut from both members of each clean/noisy image pair.
pub fn extract_paired_patches(
    pairs: &[(ImageBuffer, ImageBuffer)],
    patch: usize,
    stride: usize,
    count: Option<usize>,
    seed: u64,
) -> Result<PatchSet> {
    for (i, (c, n)) in pairs.iter().enumerate() {
        if (c.height(), c.width(), c.channels()) != (n.height(), n.width(), n.channels()) {
            return Err(DataError::Invalid(format!("pair {i}: clean and noisy images differ in size")));
        }
    }
    let channels = common_channels(pairs.iter().map(|p| &p.0))?;
    let dims: Vec<_> = pairs.iter().map(|(m, _)| (m.height(), m.width())).collect();
    let windows = sample_windows(&dims, patch, stride, count, seed)?;
    let floats: Vec<(Tensor<f32>, Tensor<f32>)> = pairs.iter().map(|(c, n)| (to_float(c), to_float(n))).collect();
    let (clean, noisy) = windows
        .iter()
        .map(|&(i, y, x)| (crop(&floats[i].0, y, x, patch), crop(&floats[i].1, y, x, patch)))
        .unzip();
    PatchSet::new(patch, channels, clean, noisy)
}

/// Quarter-turn count drawn uniformly from `{0, 1, 2, 3}` for `seed`.
pub fn augment_turns(seed: u64) -> u8 {
    SplitMix64::new(seed).below(4) as u8
}

/// Rotates both members of a patch pair by the same random quarter turn.
pub fn augment(clean: &Tensor<f32>, noisy: &Tensor<f32>, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    for t in [clean, noisy] {
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(DataError::Invalid(format!("augmentation needs square patches, got {s:?}")));
        }
    }
    if clean.shape() != noisy.shape() {
        return Err(DataError::Invalid("clean and noisy patches differ in shape".into()));
    }
    let k = augment_turns(seed) as i32;
    Ok((clean.rotate90k(k)?, noisy.rotate90k(k)?))
}

/// One epoch of shuffled mini-batches over a [`PatchSet`].
pub struct Batches<'a> {
    set: &'a PatchSet,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Batches<'_> {
    /// Patch indices in delivery order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    /// `(clean, noisy)`, each `(batch, channels, p, p)`.
    type Item = (Tensor<f32>, Tensor<f32>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..(self.pos + self.batch).min(self.order.len())];
        self.pos += idx.len();
        let (c, p) = (self.set.channels, self.set.patch_size);
        let stack = |src: &[Tensor<f32>]| {
            let mut data = Vec::with_capacity(idx.len() * c * p * p);
            for &i in idx {
                data.extend_from_slice(src[i].data());
            }
            Tensor::new(&[idx.len(), c, p, p], data).expect("batch shape")
        };
        Some((stack(&self.set.clean), stack(&self.set.noisy)))
    }
}

/// Shuffles the set with `seed` and yields batches of `batch_size`; the last
/// batch may be short.
pub fn batch_iter(set: &PatchSet, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be at least 1".into()));
    }
    if set.is_empty() {
        return Err(DataError::Invalid("cannot batch an empty patch set".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    Ok(Batches {
        set,
        order,
        batch: batch_size,
        pos: 0,
    })
}
