//! Flat `key=value` training configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::EncoderConfig;
use crate::decoder::{DecoderConfig, DecoderKind};
use crate::error::{config, io_err, Result};
use crate::grid::PYRAMID_LEVELS;
use crate::losses::{LossConfig, WeightReference};
use crate::model::ModelConfig;
use crate::scalar::DType;

/// Preset bundles of defaults selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Tiny network on synthetic 64×64 pairs; runs in minutes on one core.
    Desk,
    /// Published protocol: large network, 384×384 inputs, 100 epochs.
    Full,
}

impl FromStr for Profile {
    type Err = crate::FtnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(config(format!("unknown profile '{other}' (expected desk|full)"))),
        }
    }
}

/// Network size preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchSize {
    Desk,
    Full,
}

/// Per-level side-output weights, written as five comma-separated numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SideWeights(pub [f64; PYRAMID_LEVELS]);

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(f64, usize, u64, String, DecoderKind);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(format!("expected true|false, got '{s}'")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for DType {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(format!("expected f32|f64, got '{s}'")),
        }
    }
    fn render(&self) -> String {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
        .into()
    }
}

impl ConfigValue for ArchSize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(ArchSize::Desk),
            "full" => Ok(ArchSize::Full),
            _ => Err(format!("expected desk|full, got '{s}'")),
        }
    }
    fn render(&self) -> String {
        match self {
            ArchSize::Desk => "desk",
            ArchSize::Full => "full",
        }
        .into()
    }
}

impl ConfigValue for WeightReference {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "label" => Ok(WeightReference::Label),
            "prediction" => Ok(WeightReference::Prediction),
            _ => Err(format!("expected label|prediction, got '{s}'")),
        }
    }
    fn render(&self) -> String {
        match self {
            WeightReference::Label => "label",
            WeightReference::Prediction => "prediction",
        }
        .into()
    }
}

impl ConfigValue for SideWeights {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let vals = s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let arr: [f64; PYRAMID_LEVELS] = vals
            .try_into()
            .map_err(|v: Vec<f64>| format!("expected {PYRAMID_LEVELS} weights, got {}", v.len()))?;
        Ok(SideWeights(arr))
    }
    fn render(&self) -> String {
        self.0.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! train_config {
    ($($(#[$doc:meta])* $name:ident : $ty:ty),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct TrainConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one field from its textual form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| config(format!("key '{key}': {e}")))?;
                    })*
                    other => return Err(config(format!("unknown key '{other}'"))),
                }
                Ok(())
            }

            /// Every field as `(key, value)` in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), ConfigValue::render(&self.$name))),*]
            }
        }
    };
}

train_config! {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    batch_size: usize,
    epochs: usize,
    /// Stop after this many optimizer steps; 0 disables the cap.
    max_steps: usize,
    lr_decay_factor: f64,
    lr_decay_every: usize,
    new_layer_lr_multiplier: f64,
    /// Square side every sample is resized to before entering the network.
    input_size: usize,
    /// Non-overlapping crop size applied at load time; 0 keeps whole images.
    tile_size: usize,
    augment: bool,
    arch: ArchSize,
    use_dfe: bool,
    use_pam: bool,
    decoder: DecoderKind,
    loss_bce: bool,
    loss_weighted: bool,
    loss_ssim: bool,
    loss_siou: bool,
    weight_reference: WeightReference,
    side_weights: SideWeights,
    boundary_weight: f64,
    ssim_window: usize,
    ssim_eps: f64,
    seed: u64,
    /// Dataset root; empty selects an in-memory synthetic set used for both training and validation.
    dataset_root: String,
    synth_count: usize,
    synth_size: usize,
    /// Where logs and checkpoints go; empty writes nothing.
    output_dir: String,
    /// Optional weight container imported into the encoder.
    pretrained: String,
    val_every: usize,
    dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Full)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let full = TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 6,
            epochs: 100,
            max_steps: 0,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            new_layer_lr_multiplier: 10.0,
            input_size: 384,
            tile_size: 256,
            augment: true,
            arch: ArchSize::Full,
            use_dfe: true,
            use_pam: true,
            decoder: DecoderKind::Pcp,
            loss_bce: true,
            loss_weighted: true,
            loss_ssim: true,
            loss_siou: true,
            weight_reference: WeightReference::Label,
            side_weights: SideWeights([1.0; PYRAMID_LEVELS]),
            boundary_weight: 2.0,
            ssim_window: 11,
            ssim_eps: 1e-4,
            seed: 0,
            dataset_root: String::new(),
            synth_count: 8,
            synth_size: 64,
            output_dir: String::new(),
            pretrained: String::new(),
            val_every: 1,
            dtype: DType::F32,
        };
        match profile {
            Profile::Full => full,
            Profile::Desk => TrainConfig {
                lr: 1e-3,
                batch_size: 4,
                epochs: 250,
                max_steps: 500,
                lr_decay_every: 1000,
                input_size: 64,
                tile_size: 0,
                augment: false,
                arch: ArchSize::Desk,
                ..full
            },
        }
    }

    /// Parses `key=value` lines over the given defaults. `#` starts a comment.
    pub fn parse_over(mut self, text: &str) -> Result<Self> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key=value, got '{raw}'", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_file(path: impl AsRef<Path>, profile: Profile) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::profile(profile).parse_over(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config("lr must be positive"));
        }
        if self.batch_size < 2 {
            return Err(config("batch_size must be at least 2 for batch normalization"));
        }
        if self.epochs < 1 {
            return Err(config("epochs must be at least 1"));
        }
        if self.lr_decay_every == 0 {
            return Err(config("lr_decay_every must be positive"));
        }
        if self.val_every == 0 {
            return Err(config("val_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config("momentum must lie in [0, 1)"));
        }
        if self.input_size < 32 || !self.input_size.is_multiple_of(32) {
            return Err(config("input_size must be a positive multiple of 32"));
        }
        self.loss_config().validate()?;
        self.model_config().encoder.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let (encoder, decoder) = match self.arch {
            ArchSize::Desk => (EncoderConfig::desk(), DecoderConfig::desk()),
            ArchSize::Full => (EncoderConfig::full(), DecoderConfig::full()),
        };
        ModelConfig {
            encoder,
            decoder,
            use_dfe: self.use_dfe,
            use_pam: self.use_pam,
            decoder_kind: self.decoder,
        }
    }

    /// Loss settings; class frequencies are filled in from the training split.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            boundary_weight: self.boundary_weight,
            ssim_window: self.ssim_window,
            ssim_eps: self.ssim_eps,
            side_weights: self.side_weights.0,
            use_bce: self.loss_bce,
            weighted_bce: self.loss_weighted,
            use_ssim: self.loss_ssim,
            use_siou: self.loss_siou,
            weight_reference: self.weight_reference,
            ..LossConfig::default()
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::profile(Profile::Desk);
        cfg.side_weights = SideWeights([1.0, 0.5, 0.25, 0.0, 2.0]);
        cfg.decoder = DecoderKind::Fp;
        let back = TrainConfig::profile(Profile::Full).parse_over(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let base = TrainConfig::profile(Profile::Desk);
        assert!(base.clone().parse_over("learning_rate=0.1").is_err());
        assert!(base.clone().parse_over("lr").is_err());
        assert!(base.clone().parse_over("batch_size=two").is_err());
        assert!(base.clone().parse_over("batch_size=1").is_err());
        assert!(base.parse_over("# comment\n\nlr = 0.5 # trailing\n").is_ok());
    }

    #[test]
    fn keys_are_field_names() {
        let cfg = TrainConfig::default();
        let keys: Vec<_> = cfg.entries().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, TrainConfig::KEYS);
    }
}
