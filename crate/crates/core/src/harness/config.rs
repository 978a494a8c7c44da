use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::unfolded::UnfoldedKind;
use crate::vlista::VlistaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ista-grid")]
    IstaGrid,
    #[serde(rename = "lista")]
    Lista,
    #[serde(rename = "dlista")]
    Dlista,
    #[serde(rename = "adlista")]
    Adlista,
    #[serde(rename = "vlista")]
    Vlista,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::IstaGrid,
        ModelKind::Lista,
        ModelKind::Dlista,
        ModelKind::Adlista,
        ModelKind::Vlista,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::IstaGrid => "ista-grid",
            ModelKind::Lista => "lista",
            ModelKind::Dlista => "dlista",
            ModelKind::Adlista => "adlista",
            ModelKind::Vlista => "vlista",
        }
    }

    pub fn unfolded(self) -> Option<UnfoldedKind> {
        match self {
            ModelKind::Lista => Some(UnfoldedKind::Lista),
            ModelKind::Dlista => Some(UnfoldedKind::Dlista),
            ModelKind::Adlista => Some(UnfoldedKind::Adlista),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model `{s}` (expected ista-grid, lista, dlista, adlista or vlista)")))
    }
}

/// Flat experiment configuration. Every key is optional; missing keys take
/// the defaults below.
///
/// ```toml
/// model = "adlista"      # overridden by --model
/// layers = 3
/// epochs = 200
/// batch_size = 128
/// lr_solver = 0.01       # unrolled models; vlista defaults to 0.001
/// lr_head = 0.001
/// weight_decay = 0.0005
/// patience = 10
/// lr_factor = 10.0
/// max_lr_drops = 3
/// kl_weight = 0.001      # vlista only
/// delta_lik = 1.0        # vlista only
/// hidden = 64            # vlista prior/posterior width
/// init_var = 0.0001      # vlista initial posterior variance
/// share_dictionary = false
/// seed = 0
/// data = "data/train.bin"  # optional
/// out_dir = "runs/adlista" # optional
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<ModelKind>,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_solver: Option<f64>,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub max_lr_drops: usize,
    pub kl_weight: f64,
    pub delta_lik: f64,
    pub hidden: usize,
    pub init_var: f64,
    pub share_dictionary: bool,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub const LR_UNFOLDED: f64 = 1e-2;
pub const LR_VLISTA: f64 = 1e-3;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let v = VlistaConfig::default();
        Self {
            model: None,
            layers: 3,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_solver: None,
            lr_head: t.lr_head,
            weight_decay: t.weight_decay,
            patience: t.patience,
            lr_factor: t.lr_factor,
            max_lr_drops: t.max_lr_drops,
            kl_weight: v.kl_weight,
            delta_lik: v.delta_lik,
            hidden: v.hidden,
            init_var: v.init_var,
            share_dictionary: false,
            seed: 0,
            data: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(ModelKind::Adlista).validate()?;
        self.vlista_config().validate()?;
        if self.layers == 0 {
            return Err(Error::InvalidConfig("layers must be >= 1".into()));
        }
        if let Some(lr) = self.lr_solver {
            if !(lr >= 0.0) {
                return Err(Error::InvalidConfig(format!("lr_solver {lr} must be >= 0")));
            }
        }
        if let Some(p) = &self.data {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!("data path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let default_lr = if kind == ModelKind::Vlista { LR_VLISTA } else { LR_UNFOLDED };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_solver: self.lr_solver.unwrap_or(default_lr),
            lr_head: self.lr_head,
            weight_decay: self.weight_decay,
            patience: self.patience,
            lr_factor: self.lr_factor,
            max_lr_drops: self.max_lr_drops,
            seed: self.seed,
        }
    }

    pub fn vlista_config(&self) -> VlistaConfig {
        VlistaConfig {
            layers: self.layers,
            hidden: self.hidden,
            delta_lik: self.delta_lik,
            kl_weight: self.kl_weight,
            init_var: self.init_var,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("epochz = 3"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn model_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        let cfg = ExperimentConfig::from_toml("model = \"ista-grid\"\nepochs = 4").unwrap();
        assert_eq!(cfg.model, Some(ModelKind::IstaGrid));
        assert_eq!(cfg.epochs, 4);
    }

    #[test]
    fn vlista_uses_lower_default_rate() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.train_config(ModelKind::Vlista).lr_solver, LR_VLISTA);
        assert_eq!(cfg.train_config(ModelKind::Dlista).lr_solver, LR_UNFOLDED);
    }
}
