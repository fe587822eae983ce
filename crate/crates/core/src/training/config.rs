use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::losses::UdaLossWeights;
use crate::networks::{AsppConfig, DiscriminatorConfig, SegNetConfig};
use crate::optim::AdamConfig;
use crate::preprocess::{AugmentConfig, PreprocessConfig};

/// The six training regimes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", try_from = "String")]
pub enum Setting {
    #[default]
    Baseline,
    Mixup,
    MixupNoWd,
    Uda1,
    Uda2,
    MixupUda1,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::Baseline,
        Setting::Mixup,
        Setting::MixupNoWd,
        Setting::Uda1,
        Setting::Uda2,
        Setting::MixupUda1,
    ];

    pub fn uses_mixup(self) -> bool {
        matches!(self, Setting::Mixup | Setting::MixupNoWd | Setting::MixupUda1)
    }

    pub fn uses_uda(self) -> bool {
        matches!(self, Setting::Uda1 | Setting::Uda2 | Setting::MixupUda1)
    }

    /// Two-level adaptation with the auxiliary head and second discriminator.
    pub fn uses_aux(self) -> bool {
        self == Setting::Uda2
    }

    /// Settings trained without weight decay on the segmenter.
    pub fn segmenter_decay_off(self) -> bool {
        matches!(self, Setting::MixupNoWd | Setting::MixupUda1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Baseline => "BASELINE",
            Setting::Mixup => "MIXUP",
            Setting::MixupNoWd => "MIXUP_NO_WD",
            Setting::Uda1 => "UDA1",
            Setting::Uda2 => "UDA2",
            Setting::MixupUda1 => "MIXUP_UDA1",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        match Setting::ALL.into_iter().find(|k| k.as_str() == up) {
            Some(k) => Ok(k),
            None => bail!(Config, "unknown setting {s:?}"),
        }
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Seg,
    Disc,
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub epochs: usize,
    pub lr_segmenter: f64,
    pub lr_discriminator: f64,
    /// First epoch (0-based) trained at the reduced rate.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Decoupled decay on the segmenter.
    pub weight_decay: f64,
    pub discriminator_weight_decay: f64,
    pub mixup_alpha: f64,
    /// Replaces every Beta draw with this λ when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixup_force_lambda: Option<f64>,
    pub uda_weights: UdaLossWeights,
    pub batch_size: usize,
    pub seed: u64,
    pub fold_count: usize,
    /// Train on every n-th slice of each scan.
    pub slice_stride: usize,
    /// Validation DSC after every epoch instead of only the last.
    pub validate_each_epoch: bool,
    pub adam: AdamConfig,
    pub segmenter: SegNetConfig,
    pub aspp: AsppConfig,
    pub discriminator: DiscriminatorConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full(Setting::Baseline)
    }
}

impl ExperimentConfig {
    /// Full-resolution schedule for a setting.
    pub fn full(setting: Setting) -> Self {
        let uda = setting.uses_uda();
        Self {
            setting,
            epochs: if uda { 30 } else { 50 },
            lr_segmenter: if uda { 1e-4 } else { 1e-3 },
            lr_discriminator: 4e-5,
            lr_drop_epoch: if uda { 25 } else { 30 },
            lr_drop_factor: 10.0,
            weight_decay: if setting.segmenter_decay_off() { 0.0 } else { DEFAULT_WEIGHT_DECAY },
            discriminator_weight_decay: DEFAULT_WEIGHT_DECAY,
            mixup_alpha: 0.7,
            mixup_force_lambda: None,
            uda_weights: UdaLossWeights::default(),
            batch_size: 16,
            seed: 0,
            fold_count: 5,
            slice_stride: 1,
            validate_each_epoch: true,
            adam: AdamConfig::default(),
            segmenter: SegNetConfig::default(),
            aspp: AsppConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
        }
    }

    /// Reduced-scale preset: 96×96 crops at 1 mm, a 4-level network with 12
    /// base filters, a narrow discriminator and a 10-epoch schedule. All
    /// settings share the segmenter learning rate so they differ only in
    /// their regularizer.
    pub fn tiny(setting: Setting) -> Self {
        Self {
            epochs: 10,
            lr_segmenter: 1e-3,
            lr_discriminator: 4e-4,
            lr_drop_epoch: 8,
            fold_count: 3,
            segmenter: SegNetConfig {
                base_filters: 12,
                depth: 4,
                ..SegNetConfig::default()
            },
            aspp: AsppConfig {
                dilation_rates: vec![1, 2, 3, 4],
                ..AsppConfig::default()
            },
            discriminator: DiscriminatorConfig {
                filter_sequence: vec![16, 32, 32, 64, 1],
                ..DiscriminatorConfig::default()
            },
            preprocess: PreprocessConfig {
                target_spacing_mm: (1.0, 1.0),
                crop_size: (96, 96),
                ..PreprocessConfig::default()
            },
            ..Self::full(setting)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be >= 1");
        }
        if !(self.lr_segmenter > 0.0 && self.lr_discriminator > 0.0) {
            bail!(Config, "learning rates must be positive");
        }
        if self.lr_drop_epoch > self.epochs {
            bail!(Config, "lr_drop_epoch {} exceeds epochs {}", self.lr_drop_epoch, self.epochs);
        }
        if !(self.lr_drop_factor > 0.0) {
            bail!(Config, "lr_drop_factor must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.discriminator_weight_decay >= 0.0) {
            bail!(Config, "weight decay must be non-negative");
        }
        if self.setting.segmenter_decay_off() && self.weight_decay != 0.0 {
            bail!(Config, "{} trains without segmenter weight decay, got {}", self.setting, self.weight_decay);
        }
        if !(self.mixup_alpha > 0.0) {
            bail!(Config, "mixup_alpha must be positive");
        }
        if let Some(l) = self.mixup_force_lambda {
            if !(0.0..=1.0).contains(&l) {
                bail!(Config, "mixup_force_lambda must lie in [0, 1]");
            }
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be >= 1");
        }
        if self.fold_count < 2 {
            bail!(Config, "fold_count must be >= 2");
        }
        if self.slice_stride == 0 {
            bail!(Config, "slice_stride must be >= 1");
        }
        self.uda_weights.validate()?;
        self.adam.validate()?;
        self.segmenter.validate()?;
        self.aspp.validate()?;
        self.discriminator.validate()?;
        self.preprocess.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Parses a config file. Keys absent from `text` take the defaults of
    /// the file's `setting` (full or tiny preset); `overrides` win over both.
    pub fn from_toml(text: &str, tiny: bool, overrides: &toml::Table) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        merge(&mut user, overrides.clone());
        let setting = match user.get("setting") {
            None => Setting::Baseline,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(v) => bail!(Config, "setting must be a string, got {v}"),
        };
        let base = if tiny { Self::tiny(setting) } else { Self::full(setting) };
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(format!("config: {e}")))?;
        merge(&mut table, user);
        let cfg: Self = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Step schedule: the initial rate before `lr_drop_epoch`, divided by
/// `lr_drop_factor` from then on.
pub fn lr_at_epoch(cfg: &ExperimentConfig, epoch: usize, which: Which) -> Result<f64> {
    if epoch >= cfg.epochs {
        bail!(Config, "epoch {epoch} is outside the {}-epoch schedule", cfg.epochs);
    }
    let base = match which {
        Which::Seg => cfg.lr_segmenter,
        Which::Disc => cfg.lr_discriminator,
    };
    Ok(if epoch >= cfg.lr_drop_epoch { base / cfg.lr_drop_factor } else { base })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-15 * b.abs()
    }

    #[test]
    fn schedule_values() {
        let b = ExperimentConfig::full(Setting::Baseline);
        assert_eq!(lr_at_epoch(&b, 0, Which::Seg).unwrap(), 1e-3);
        assert_eq!(lr_at_epoch(&b, 29, Which::Seg).unwrap(), 1e-3);
        assert!(close(lr_at_epoch(&b, 30, Which::Seg).unwrap(), 1e-4));
        let u = ExperimentConfig::full(Setting::Uda1);
        assert_eq!(u.epochs, 30);
        assert_eq!(lr_at_epoch(&u, 0, Which::Seg).unwrap(), 1e-4);
        assert!(close(lr_at_epoch(&u, 25, Which::Disc).unwrap(), 4e-6));
        assert_eq!(lr_at_epoch(&u, 30, Which::Seg).unwrap_err().code(), "ConfigError");
    }

    #[test]
    fn weight_decay_per_setting() {
        for s in Setting::ALL {
            let c = ExperimentConfig::full(s);
            let expect = if matches!(s, Setting::MixupNoWd | Setting::MixupUda1) { 0.0 } else { 5e-5 };
            assert_eq!(c.weight_decay, expect, "{s}");
            assert_eq!(c.discriminator_weight_decay, 5e-5);
            c.validate().unwrap();
        }
    }

    #[test]
    fn toml_layers() {
        let cfg = ExperimentConfig::from_toml("setting = \"UDA1\"\nseed = 3\n[segmenter]\nbase_filters = 4\n", false, &toml::Table::new()).unwrap();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.segmenter.base_filters, 4);
        assert_eq!(cfg.segmenter.depth, 6);
        let mut over = toml::Table::new();
        over.insert("epochs".into(), toml::Value::Integer(2));
        over.insert("lr_drop_epoch".into(), toml::Value::Integer(1));
        let cfg = ExperimentConfig::from_toml("setting = \"mixup_no_wd\"", true, &over).unwrap();
        assert_eq!((cfg.epochs, cfg.weight_decay, cfg.preprocess.crop_size), (2, 0.0, (96, 96)));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), false, &toml::Table::new()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let none = toml::Table::new();
        assert_eq!(ExperimentConfig::from_toml("epoch = 3", false, &none).unwrap_err().code(), "ConfigError");
        assert_eq!(ExperimentConfig::from_toml("epochs = 0", false, &none).unwrap_err().code(), "ConfigError");
        assert_eq!(ExperimentConfig::from_toml("epochs = ", false, &none).unwrap_err().code(), "ParseError");
        let e = ExperimentConfig::from_toml("setting = \"MIXUP_NO_WD\"\nweight_decay = 5e-5", false, &none).unwrap_err();
        assert_eq!(e.code(), "ConfigError");
    }
}
