//! Shared inputs for the benchmarks.

use evdeblur_core::events::{Event, EventStream, Polarity};
use evdeblur_core::simulator::{simulate, Motion, SceneConfig, ScenePack, Texture};
use evdeblur_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `n` uniformly scattered events over `[0, 1]`.
pub fn random_stream(width: usize, height: usize, n: usize, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = (0..n)
        .map(|_| {
            let p = if rng.gen_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            Event::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0..width) as u16,
                rng.gen_range(0..height) as u16,
                p,
            )
        })
        .collect();
    EventStream::from_unsorted(events, 0.0, 1.0, width, height).expect("valid stream")
}

/// A 64x64 translating scene.
pub fn toy_scene(seed: u64) -> ScenePack {
    let cfg = SceneConfig::new(
        64,
        64,
        Motion::Translate { vx: 1.5, vy: 0.7 },
        Texture::GaussianBlobs { count: 12 },
        seed,
    );
    simulate(&cfg, 0.2).expect("valid scene")
}
