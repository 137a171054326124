//! Experiment configuration: one TOML file describes the network, the
//! training run, the synthetic domains and the score constants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_domain, DomainData, DomainSpec, GeneratorKind};
use crate::error::{Error, Result};
use crate::metrics::ScoreConstants;
use crate::model::{LayerSpec, MaskAggregation, NetConfig};
use crate::trainer::TrainConfig;

/// Named layer stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Standard,
    DeskSmall,
}

impl Preset {
    fn layers(self) -> Vec<LayerSpec> {
        match self {
            Self::Standard => NetConfig::standard(vec![2]).layers,
            Self::DeskSmall => NetConfig::desk_small(vec![2]).layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    /// Used when `layers` is absent.
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    pub threshold: f32,
    pub switch_init: f32,
    pub aggregation: MaskAggregation,
    pub backbone_seed: u64,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            preset: Preset::DeskSmall,
            layers: None,
            threshold: 0.0,
            switch_init: 1e-3,
            aggregation: MaskAggregation::PerLayer,
            backbone_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub metrics: ScoreConstants,
}

impl ExperimentConfig {
    /// Three 6-class domains on 16x16 images with the small layer stack.
    pub fn desk_suite() -> Self {
        let kinds = [GeneratorKind::Shapes, GeneratorKind::Textures, GeneratorKind::Glyphs];
        let domains = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| DomainSpec { train: 384, test: 192, ..DomainSpec::new(k, 6, 16, 100 + i as u64) })
            .collect();
        Self { net: NetSection::default(), train: TrainConfig::default(), domains, metrics: ScoreConstants::default() }
    }

    /// Parses and validates; `source` names the file in error messages.
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(source, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The network for these domains: RGB input at the domains' image size,
    /// one head per domain.
    pub fn net_config(&self) -> Result<NetConfig> {
        let size = self.domains.first().map(|d| d.image_size).ok_or_else(|| Error::config("domains", "at least one domain is required"))?;
        Ok(NetConfig {
            input: [3, size, size],
            layers: self.net.layers.clone().unwrap_or_else(|| self.net.preset.layers()),
            classes: self.domains.iter().map(|d| d.classes).collect(),
            threshold: self.net.threshold,
            switch_init: self.net.switch_init,
            aggregation: self.net.aggregation,
            backbone_seed: self.net.backbone_seed,
        })
    }

    /// Checks every section; nothing is computed before this passes.
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::config("domains", "at least one domain is required"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate(&format!("domains[{i}]"))?;
            if d.image_size != self.domains[0].image_size {
                return Err(Error::config(format!("domains[{i}].image_size"), "every domain must use the same image size"));
            }
        }
        if !(self.net.switch_init.is_finite()) {
            return Err(Error::config("net.switch_init", "must be finite"));
        }
        if !(self.net.threshold.is_finite()) {
            return Err(Error::config("net.threshold", "must be finite"));
        }
        self.net_config()?.plan("net.")?;
        self.train.validate("train")?;
        self.metrics.validate("metrics")
    }

    /// Renders every domain. Train and val are merged for training.
    pub fn generate(&self) -> Result<Vec<DomainData>> {
        self.domains.iter().map(generate_domain).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LambdaMode, SharingKind};

    const MINIMAL: &str = r#"
        [[domains]]
        kind = "shapes"
        classes = 3
        image_size = 8
        train = 10
        test = 4
    "#;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, "t.toml").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.net_config().unwrap().input, [3, 8, 8]);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::desk_suite();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml(), "t").unwrap(), cfg);
    }

    #[test]
    fn sharing_and_lambda_strings() {
        let text = format!("[train]\nsharing = \"none\"\nlambda_ps_mode = \"fixed:0.25\"\n{MINIMAL}");
        let cfg = ExperimentConfig::from_toml(&text, "t").unwrap();
        assert_eq!(cfg.train.sharing, None);
        assert_eq!(cfg.train.lambda_ps_mode, LambdaMode::Fixed(0.25));
        let text = format!("[train]\nsharing = \"jaccard\"\n{MINIMAL}");
        assert_eq!(ExperimentConfig::from_toml(&text, "t").unwrap().train.sharing, Some(SharingKind::Jaccard));
    }

    #[test]
    fn errors_name_the_field() {
        let path = |text: String| match ExperimentConfig::from_toml(&text, "t") {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(path(format!("[train]\nbudget = 1.5\n{MINIMAL}")), "train.budget");
        assert_eq!(path(MINIMAL.replace("classes = 3", "classes = 1")), "domains[0].classes");
        assert_eq!(path(format!("[metrics]\ngamma = 0.0\n{MINIMAL}")), "metrics.gamma");
        assert_eq!(path("[train]\nbogus = 1\n".to_string()), "t");
    }
}
