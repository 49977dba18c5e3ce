//! Event data types, windowed integration, voxel-grid encoding and
//! fixed-duration chunking.
//!
//! Time windows are half-open `[from, to)`. The last chunk of a partition
//! (and the full-stream window) is closed on the right so that every event
//! belongs to exactly one chunk.

mod io;

pub use io::{read_events, write_events, EventFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of temporal bins in a voxel grid.
pub const DEFAULT_BINS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn value(self) -> f64 {
        self.sign() as f64
    }

    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// A single brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Time-ordered events inside an exposure window `[t0, t1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    t0: f64,
    t1: f64,
    width: usize,
    height: usize,
}

impl EventStream {
    /// Validates ordering and bounds. `t1 == t0` is representable but every
    /// encoding operation rejects it.
    pub fn new(events: Vec<Event>, t0: f64, t1: f64, width: usize, height: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite()) || t1 < t0 {
            return Err(Error::InvalidStream(format!("bad window [{t0}, {t1}]")));
        }
        if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
            return Err(Error::InvalidStream(format!("bad sensor size {width}x{height}")));
        }
        let mut prev = t0;
        for (i, e) in events.iter().enumerate() {
            if !(e.t >= t0 && e.t <= t1) {
                return Err(Error::InvalidStream(format!(
                    "event {i} at t={} outside [{t0}, {t1}]",
                    e.t
                )));
            }
            if e.t < prev {
                return Err(Error::InvalidStream(format!(
                    "event {i} at t={} precedes t={prev}",
                    e.t
                )));
            }
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::InvalidStream(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            prev = e.t;
        }
        Ok(Self {
            events,
            t0,
            t1,
            width,
            height,
        })
    }

    /// Sorts by time (stable) before validating.
    pub fn from_unsorted(mut events: Vec<Event>, t0: f64, t1: f64, width: usize, height: usize) -> Result<Self> {
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self::new(events, t0, t1, width, height)
    }

    pub fn empty(t0: f64, t1: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(Vec::new(), t0, t1, width, height)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn polarity_sum(&self) -> f64 {
        self.events.iter().map(|e| e.polarity.value()).sum()
    }

    fn check_window(&self, from: f64, to: f64) -> Result<()> {
        if !(self.t0 <= from && from <= to && to <= self.t1) {
            return Err(Error::Bounds {
                from,
                to,
                t0: self.t0,
                t1: self.t1,
            });
        }
        Ok(())
    }

    fn check_nondegenerate(&self) -> Result<()> {
        if self.t1 > self.t0 {
            Ok(())
        } else {
            Err(Error::DegenerateWindow {
                t0: self.t0,
                t1: self.t1,
            })
        }
    }

    /// Index of the first event with `t >= time`.
    fn lower_bound(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.t < time)
    }

    /// Index one past the last event with `t <= time`.
    fn upper_bound(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.t <= time)
    }

    /// Events with `from <= t < to`, or `from <= t <= to` when `to` is the
    /// stream end.
    pub fn window(&self, from: f64, to: f64) -> Result<&[Event]> {
        self.check_window(from, to)?;
        let lo = self.lower_bound(from);
        let hi = if to == self.t1 {
            self.events.len()
        } else {
            self.lower_bound(to)
        };
        Ok(&self.events[lo..hi.max(lo)])
    }

    /// Events with `from <= t <= to`, right-closed regardless of `to`.
    pub fn window_through(&self, from: f64, to: f64) -> Result<&[Event]> {
        self.check_window(from, to)?;
        let lo = self.lower_bound(from);
        let hi = self.upper_bound(to);
        Ok(&self.events[lo..hi.max(lo)])
    }
}

/// Per-pixel net polarity count over a time window.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarityImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PolarityImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn add_events(&mut self, events: &[Event]) {
        for e in events {
            self.values[e.y as usize * self.width + e.x as usize] += e.polarity.value();
        }
    }
}

/// Sums polarities per pixel for events in `[t_from, t_to)`.
pub fn accumulate(stream: &EventStream, t_from: f64, t_to: f64) -> Result<PolarityImage> {
    let mut img = PolarityImage::zeros(stream.width, stream.height);
    img.add_events(stream.window(t_from, t_to)?);
    Ok(img)
}

/// Like [`accumulate`] but also counts events stamped exactly at `t_to`.
pub fn accumulate_through(stream: &EventStream, t_from: f64, t_to: f64) -> Result<PolarityImage> {
    let mut img = PolarityImage::zeros(stream.width, stream.height);
    img.add_events(stream.window_through(t_from, t_to)?);
    Ok(img)
}

/// Dense `B x H x W` signed event encoding of a time window.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub width: usize,
    pub height: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, width: usize, height: usize, t_start: f64, t_end: f64) -> Self {
        Self {
            bins,
            width,
            height,
            t_start,
            t_end,
            data: vec![0.0; bins * width * height],
        }
    }

    pub fn get(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `(1, B, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.bins, self.height, self.width], self.data.clone()).expect("voxel sizes agree")
    }

    fn splat(&mut self, events: &[Event]) {
        let span = self.t_end - self.t_start;
        let b = self.bins;
        let plane = self.width * self.height;
        for e in events {
            // Position in units of bins, measured from the first bin center.
            let u = (e.t - self.t_start) / span * b as f64 - 0.5;
            let pix = e.y as usize * self.width + e.x as usize;
            let p = e.polarity.value();
            if u <= 0.0 || b == 1 {
                self.data[pix] += p;
            } else if u >= (b - 1) as f64 {
                self.data[(b - 1) * plane + pix] += p;
            } else {
                let k = u.floor();
                let frac = u - k;
                let k = k as usize;
                self.data[k * plane + pix] += p * (1.0 - frac);
                self.data[(k + 1) * plane + pix] += p * frac;
            }
        }
    }
}

/// Bilinear temporal splatting of each event between the two nearest bin
/// centers `t0 + (k + 0.5) * (t1 - t0) / bins`. Events before the first or
/// after the last center go entirely to the edge bin, so total signed mass
/// is preserved.
pub fn voxelize(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::InvalidArgument("voxel grid needs at least one bin".into()));
    }
    stream.check_nondegenerate()?;
    let mut grid = VoxelGrid::zeros(bins, stream.width, stream.height, stream.t0, stream.t1);
    grid.splat(&stream.events);
    Ok(grid)
}

/// `N` consecutive equal-duration voxel grids.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSet {
    pub chunks: Vec<VoxelGrid>,
    /// Number of events that fell into each chunk.
    pub counts: Vec<usize>,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Boundaries `t0 + i * (t1 - t0) / n` for `i = 0..=n`, with the last one
/// exactly `t1`.
pub fn chunk_bounds(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    let step = (t1 - t0) / n as f64;
    let mut b: Vec<f64> = (0..n).map(|i| t0 + i as f64 * step).collect();
    b.push(t1);
    b
}

/// Splits the stream into `n_chunks` windows `[t0 + i*d, t0 + (i+1)*d)`
/// (last closed) and voxelizes each with `bins` bins.
pub fn chunk_with_bins(stream: &EventStream, n_chunks: usize, bins: usize) -> Result<ChunkSet> {
    if n_chunks == 0 {
        return Err(Error::InvalidArgument("need at least one chunk".into()));
    }
    stream.check_nondegenerate()?;
    let bounds = chunk_bounds(stream.t0, stream.t1, n_chunks);
    let mut chunks = Vec::with_capacity(n_chunks);
    let mut counts = Vec::with_capacity(n_chunks);
    for i in 0..n_chunks {
        let (a, b) = (bounds[i], bounds[i + 1]);
        let events = stream.window(a, b)?;
        let mut grid = VoxelGrid::zeros(bins, stream.width, stream.height, a, b);
        if b > a {
            grid.splat(events);
        } else if !events.is_empty() {
            return Err(Error::DegenerateWindow { t0: a, t1: b });
        }
        counts.push(events.len());
        chunks.push(grid);
    }
    Ok(ChunkSet { chunks, counts })
}

pub fn chunk(stream: &EventStream, n_chunks: usize) -> Result<ChunkSet> {
    chunk_with_bins(stream, n_chunks, DEFAULT_BINS)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            prop::collection::vec((0.0f64..=1.0, 0..w as u16, 0..h as u16, prop::bool::ANY), 0..60).prop_map(
                move |raw| {
                    let events = raw
                        .into_iter()
                        .map(|(t, x, y, p)| {
                            Event::new(t, x, y, if p { Polarity::Positive } else { Polarity::Negative })
                        })
                        .collect();
                    EventStream::from_unsorted(events, 0.0, 1.0, w, h).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn voxel_mass_is_conserved(s in arb_stream(), bins in 1usize..8) {
            let g = voxelize(&s, bins).unwrap();
            prop_assert!((g.mass() - s.polarity_sum()).abs() < 1e-9);
        }

        #[test]
        fn chunks_partition_the_stream(s in arb_stream(), n in 1usize..9) {
            let c = chunk(&s, n).unwrap();
            prop_assert_eq!(c.counts.iter().sum::<usize>(), s.len());
            let mass: f64 = c.chunks.iter().map(|g| g.mass()).sum();
            prop_assert!((mass - s.polarity_sum()).abs() < 1e-9);
        }

        #[test]
        fn accumulate_is_additive(s in arb_stream(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0) {
            let mut v = [a, b, c];
            v.sort_by(f64::total_cmp);
            let whole = accumulate(&s, v[0], v[2]).unwrap();
            let left = accumulate(&s, v[0], v[1]).unwrap();
            let right = accumulate(&s, v[1], v[2]).unwrap();
            for i in 0..whole.values.len() {
                prop_assert_eq!(whole.values[i], left.values[i] + right.values[i]);
            }
        }

        #[test]
        fn voxelize_ignores_event_order(s in arb_stream(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            // Reorder events that share a timestamp-independent key: shuffle,
            // then re-sort stably by time so the stream stays valid.
            let mut events = s.events().to_vec();
            events.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = EventStream::from_unsorted(events, s.t0(), s.t1(), s.width(), s.height()).unwrap();
            let a = voxelize(&s, 5).unwrap();
            let b = voxelize(&shuffled, 5).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
