//! Event-based double integral deblurring.
//!
//! The sharp frame at the exposure start is `B / mean_t exp(c * E(t0, t))`
//! where `E(t0, t)` is the per-pixel polarity sum up to and including `t`.

use crate::error::{shape_err, Error, Result};
use crate::events::{accumulate_through, EventStream};
use crate::image::Image;
use crate::simulator::uniform_times;

pub const DEFAULT_SAMPLES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdiParams {
    pub c: f64,
    pub n_samples: usize,
}

impl EdiParams {
    pub fn new(c: f64) -> Self {
        Self {
            c,
            n_samples: DEFAULT_SAMPLES,
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.n_samples = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::InvalidArgument(format!("c must be positive, got {}", self.c)));
        }
        if self.n_samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_samples must be at least 2, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}

fn check_inputs(blur: &Image, stream: &EventStream, params: &EdiParams) -> Result<()> {
    params.validate()?;
    if blur.width() != stream.width() || blur.height() != stream.height() {
        return Err(shape_err!(
            "blur is {}x{}, events are {}x{}",
            blur.width(),
            blur.height(),
            stream.width(),
            stream.height()
        ));
    }
    if !(stream.t1() > stream.t0()) {
        return Err(Error::DegenerateWindow {
            t0: stream.t0(),
            t1: stream.t1(),
        });
    }
    Ok(())
}

/// Per-pixel `mean_s exp(c * E(t0, s))` over `n_samples` uniform instants,
/// in one sweep over the sorted stream. Event-free pixels get exactly 1.
pub fn edi_denominator(stream: &EventStream, params: &EdiParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = stream.width() * stream.height();
    let mut integral = vec![0.0; n];
    let mut gain_sum = vec![0.0; n];
    let events = stream.events();
    let mut next = 0;
    let samples = uniform_times(stream.t0(), stream.t1(), params.n_samples);
    for &s in &samples {
        while next < events.len() && events[next].t <= s {
            let e = &events[next];
            integral[e.y as usize * stream.width() + e.x as usize] += e.polarity.value();
            next += 1;
        }
        for (g, e) in gain_sum.iter_mut().zip(&integral) {
            *g += (params.c * e).exp();
        }
    }
    let m = samples.len() as f64;
    Ok(gain_sum.into_iter().map(|g| g / m).collect())
}

/// Sharp estimate at `t0`. One gain field, computed from the events, is
/// shared by every channel. Output is clamped below at zero only.
pub fn edi_deblur(blur: &Image, stream: &EventStream, params: &EdiParams) -> Result<Image> {
    check_inputs(blur, stream, params)?;
    let denom = edi_denominator(stream, params)?;
    let mut out = blur.clone();
    for c in 0..blur.channels() {
        for (v, d) in out.plane_mut(c).iter_mut().zip(&denom) {
            *v = (*v / d).max(0.0);
        }
    }
    Ok(out)
}

/// Sharp estimate at `t`: the `t0` estimate times `exp(c * E(t0, t))`.
pub fn reconstruct_at(blur: &Image, stream: &EventStream, params: &EdiParams, t: f64) -> Result<Image> {
    check_inputs(blur, stream, params)?;
    if !(stream.t0() <= t && t <= stream.t1()) {
        return Err(Error::Bounds {
            from: t,
            to: t,
            t0: stream.t0(),
            t1: stream.t1(),
        });
    }
    let mut out = edi_deblur(blur, stream, params)?;
    let e = accumulate_through(stream, stream.t0(), t)?;
    for c in 0..out.channels() {
        for (v, n) in out.plane_mut(c).iter_mut().zip(&e.values) {
            if *n != 0.0 {
                *v *= (params.c * n).exp();
            }
        }
    }
    Ok(out)
}

pub fn reconstruct_mid(blur: &Image, stream: &EventStream, params: &EdiParams) -> Result<Image> {
    reconstruct_at(blur, stream, params, 0.5 * (stream.t0() + stream.t1()))
}

/// Central-difference gradient magnitude of the luma, one-sided at borders.
fn gradient_magnitude(img: &Image) -> Vec<f64> {
    let l = img.luma();
    let (w, h) = (l.width(), l.height());
    let p = l.data();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = if xr > xl {
                (p[y * w + xr] - p[y * w + xl]) / (xr - xl) as f64
            } else {
                0.0
            };
            let gy = if yd > yu {
                (p[yd * w + x] - p[yu * w + x]) / (yd - yu) as f64
            } else {
                0.0
            };
            out[y * w + x] = gx.hypot(gy);
        }
    }
    out
}

/// Normalized cross-correlation; zero when either input is constant.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let d = (saa * sbb).sqrt();
    if d > 0.0 {
        sab / d
    } else {
        0.0
    }
}

/// Score of one candidate threshold: NCC between the gradient magnitude of
/// the mid-exposure reconstruction and the per-pixel event count.
pub fn score_c(blur: &Image, stream: &EventStream, c: f64, n_samples: usize) -> Result<f64> {
    let params = EdiParams { c, n_samples };
    let rec = reconstruct_mid(blur, stream, &params)?;
    let mut counts = vec![0.0; stream.width() * stream.height()];
    for e in stream.events() {
        counts[e.y as usize * stream.width() + e.x as usize] += 1.0;
    }
    Ok(ncc(&gradient_magnitude(&rec), &counts))
}

/// Grid search for the contrast threshold; ties go to the smaller value.
pub fn estimate_c(blur: &Image, stream: &EventStream, grid: &[f64], n_samples: usize) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty candidate grid for c".into()));
    }
    if let Some(bad) = grid.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "candidate c must be positive, got {bad}"
        )));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], score_c(blur, stream, sorted[0], n_samples)?);
    for &c in &sorted[1..] {
        let s = score_c(blur, stream, c, n_samples)?;
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best.0)
}
