use super::model::InputVars;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::events::{chunk_with_bins, read_events, voxelize, EventStream};
use crate::image::Image;
use crate::parallel::par_map;
use crate::simulator::{Manifest, ManifestEntry};
use crate::tensor::{Tape, Tensor};

/// Percentile of non-zero absolute voxel values used as the input scale.
pub const VOXEL_PERCENTILE: f64 = 0.98;

/// Nearest-rank percentile of the non-zero `|v|`, or `None` when every
/// value is zero.
pub fn voxel_scale<'a>(values: impl IntoIterator<Item = &'a f64>) -> Option<f64> {
    let mut mags: Vec<f64> = values.into_iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    if mags.is_empty() {
        return None;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((VOXEL_PERCENTILE * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    Some(mags[rank - 1])
}

/// Divides every tensor by one shared [`voxel_scale`]; empty grids pass
/// through unchanged.
pub fn normalize_voxels(ts: &mut [Tensor]) {
    let scale = voxel_scale(ts.iter().flat_map(|t| t.data()));
    if let Some(s) = scale {
        for t in ts {
            t.scale_in_place(1.0 / s);
        }
    }
}

/// Network-ready tensors for one or more scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput {
    pub blur: Tensor,
    pub voxel: Tensor,
    pub chunks: Vec<Tensor>,
}

impl NetInput {
    /// Voxelizes and chunks `events` over its own time span and normalizes
    /// the voxel grid and the chunk set separately.
    pub fn prepare(blur: &Image, events: &EventStream, cfg: &ModelConfig) -> Result<Self> {
        if (events.width(), events.height()) != (blur.width(), blur.height()) {
            return Err(Error::Shape(format!(
                "events are {}x{}, blur is {}x{}",
                events.width(),
                events.height(),
                blur.width(),
                blur.height()
            )));
        }
        if blur.channels() != cfg.image_channels {
            return Err(Error::Shape(format!(
                "blur has {} channels, model expects {}",
                blur.channels(),
                cfg.image_channels
            )));
        }
        cfg.check_input_size(blur.height(), blur.width())?;
        let mut voxel = [voxelize(events, cfg.voxel_bins)?.to_tensor()];
        normalize_voxels(&mut voxel);
        let mut chunks: Vec<Tensor> = chunk_with_bins(events, cfg.n_chunks, cfg.voxel_bins)?
            .chunks
            .iter()
            .map(|g| g.to_tensor())
            .collect();
        normalize_voxels(&mut chunks);
        let [voxel] = voxel;
        Ok(Self {
            blur: blur.to_tensor(),
            voxel,
            chunks,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> InputVars {
        InputVars {
            blur: tape.constant(self.blur.clone()),
            voxel: tape.constant(self.voxel.clone()),
            chunks: self.chunks.iter().map(|c| tape.constant(c.clone())).collect(),
        }
    }

    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<Self> {
        Ok(Self {
            blur: self.blur.crop(y, x, size, size)?,
            voxel: self.voxel.crop(y, x, size, size)?,
            chunks: self
                .chunks
                .iter()
                .map(|c| c.crop(y, x, size, size))
                .collect::<Result<_>>()?,
        })
    }

    /// Stacks inputs along the batch axis.
    pub fn stack(items: &[&NetInput]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero inputs".into()))?;
        let blurs: Vec<&Tensor> = items.iter().map(|i| &i.blur).collect();
        let voxels: Vec<&Tensor> = items.iter().map(|i| &i.voxel).collect();
        let mut chunks = Vec::with_capacity(first.chunks.len());
        for k in 0..first.chunks.len() {
            let ck: Vec<&Tensor> = items
                .iter()
                .map(|i| {
                    i.chunks
                        .get(k)
                        .ok_or_else(|| Error::Shape("inputs differ in chunk count".into()))
                })
                .collect::<Result<_>>()?;
            chunks.push(Tensor::cat_batch(&ck)?);
        }
        Ok(Self {
            blur: Tensor::cat_batch(&blurs)?,
            voxel: Tensor::cat_batch(&voxels)?,
            chunks,
        })
    }
}

/// A scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub input: NetInput,
    pub gt: Tensor,
}

impl Sample {
    pub fn load(entry: &ManifestEntry, cfg: &ModelConfig) -> Result<Self> {
        let blur = Image::read_pnm(&entry.blur)?;
        let gt = Image::read_pnm(&entry.gt)?;
        blur.check_same_shape(&gt)?;
        let events = read_events(&entry.events)?;
        Ok(Self {
            name: entry.name(),
            input: NetInput::prepare(&blur, &events, cfg)?,
            gt: gt.to_tensor(),
        })
    }

    pub fn blur_image(&self) -> Result<Image> {
        Image::from_tensor(&self.input.blur)
    }

    pub fn gt_image(&self) -> Result<Image> {
        Image::from_tensor(&self.gt)
    }
}

/// Loads every scene of `manifest`, preserving order.
pub fn load_samples(manifest: &Manifest, cfg: &ModelConfig, threads: usize) -> Result<Vec<Sample>> {
    par_map(&manifest.entries, threads, |e| Sample::load(e, cfg))
        .into_iter()
        .collect()
}
