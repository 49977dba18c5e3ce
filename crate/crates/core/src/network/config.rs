use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::events::DEFAULT_BINS;

/// Architecture and ablation toggles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_scales: usize,
    pub base_channels: usize,
    pub n_chunks: usize,
    pub kernel: usize,
    pub voxel_bins: usize,
    /// Width of the recurrent event features.
    pub event_channels: usize,
    pub n_resblocks: usize,
    pub image_channels: usize,
    pub use_events: bool,
    pub use_deblur_module: bool,
    pub use_lstm: bool,
    pub use_c2f: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_scales: 3,
            base_channels: 16,
            n_chunks: 5,
            kernel: 3,
            voxel_bins: DEFAULT_BINS,
            event_channels: 8,
            n_resblocks: 10,
            image_channels: 1,
            use_events: true,
            use_deblur_module: true,
            use_lstm: true,
            use_c2f: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_scales",
        "base_channels",
        "n_chunks",
        "kernel",
        "voxel_bins",
        "event_channels",
        "n_resblocks",
        "image_channels",
        "use_events",
        "use_deblur_module",
        "use_lstm",
        "use_c2f",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_scales", self.n_scales),
            ("base_channels", self.base_channels),
            ("n_chunks", self.n_chunks),
            ("kernel", self.kernel),
            ("voxel_bins", self.voxel_bins),
            ("event_channels", self.event_channels),
            ("image_channels", self.image_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.use_deblur_module && !self.use_events {
            return Err(Error::Config("use_deblur_module requires use_events".into()));
        }
        if self.use_lstm && !self.use_deblur_module {
            return Err(Error::Config("use_lstm requires use_deblur_module".into()));
        }
        Ok(())
    }

    /// Image sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.n_scales - 1)
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {height}x{width} is not a positive multiple of {m} for {} scales",
                self.n_scales
            )));
        }
        Ok(())
    }

    /// Overrides fields present in `kv`; other keys are left to the caller.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.update("n_scales", &mut self.n_scales)?;
        kv.update("base_channels", &mut self.base_channels)?;
        kv.update("n_chunks", &mut self.n_chunks)?;
        kv.update("kernel", &mut self.kernel)?;
        kv.update("voxel_bins", &mut self.voxel_bins)?;
        kv.update("event_channels", &mut self.event_channels)?;
        kv.update("n_resblocks", &mut self.n_resblocks)?;
        kv.update("image_channels", &mut self.image_channels)?;
        kv.update("use_events", &mut self.use_events)?;
        kv.update("use_deblur_module", &mut self.use_deblur_module)?;
        kv.update("use_lstm", &mut self.use_lstm)?;
        kv.update("use_c2f", &mut self.use_c2f)?;
        kv.update("seed", &mut self.seed)?;
        self.validate()
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(Self::KEYS)?;
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("n_scales", self.n_scales);
        kv.set("base_channels", self.base_channels);
        kv.set("n_chunks", self.n_chunks);
        kv.set("kernel", self.kernel);
        kv.set("voxel_bins", self.voxel_bins);
        kv.set("event_channels", self.event_channels);
        kv.set("n_resblocks", self.n_resblocks);
        kv.set("image_channels", self.image_channels);
        kv.set("use_events", self.use_events);
        kv.set("use_deblur_module", self.use_deblur_module);
        kv.set("use_lstm", self.use_lstm);
        kv.set("use_c2f", self.use_c2f);
        kv.set("seed", self.seed);
        kv
    }

    /// Sets the four ablation toggles at once.
    pub fn with_toggles(mut self, events: bool, deblur_module: bool, lstm: bool, c2f: bool) -> Self {
        self.use_events = events;
        self.use_deblur_module = deblur_module;
        self.use_lstm = lstm;
        self.use_c2f = c2f;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_the_toy_configuration() {
        let c = ModelConfig::default();
        assert_eq!((c.n_scales, c.base_channels, c.n_chunks, c.kernel), (3, 16, 5, 3));
        c.validate().unwrap();
        assert_eq!(c.size_multiple(), 4);
    }

    #[test]
    fn inconsistent_toggles_are_rejected() {
        let base = ModelConfig::default();
        assert!(base.clone().with_toggles(false, true, false, true).validate().is_err());
        assert!(base.clone().with_toggles(true, false, true, true).validate().is_err());
        assert!(base.clone().with_toggles(false, false, false, false).validate().is_ok());
        let even = ModelConfig {
            kernel: 4,
            ..base.clone()
        };
        assert!(even.validate().is_err());
        let flat = ModelConfig { n_scales: 0, ..base };
        assert!(flat.validate().is_err());
    }

    #[test]
    fn key_value_round_trip() {
        let c = ModelConfig {
            n_scales: 2,
            use_lstm: false,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        let bad = KeyValues::parse("depth = 3").unwrap();
        assert!(ModelConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn input_size_must_divide_into_scales() {
        let c = ModelConfig::default();
        assert!(c.check_input_size(64, 64).is_ok());
        assert!(c.check_input_size(62, 64).is_err());
    }
}
