//! Run configuration file: model structure plus training settings.
//!
//! ```toml
//! [vision]
//! dim = 64
//! [fusion]
//! blocks = 3
//! [train]
//! epochs = 20
//! ```
//!
//! Every section and key is optional; missing ones take built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{line_of, Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::text::TextConfig;
use crate::train::TrainConfig;
use crate::vision::VitConfig;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vision: VitConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vision: self.vision,
            text: self.text,
            fusion: self.fusion,
        }
    }

    pub fn parse(src: &str, path: &Path) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(1, |s| line_of(src, s.start)),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("", Path::new("c.toml")).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::parse("[fusion]\nblocks = 1\n[train]\nepochs = 3\n", Path::new("c.toml")).unwrap();
        assert_eq!(c.fusion.blocks, 1);
        assert_eq!(c.fusion.heads, FusionConfig::default().heads);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        assert_eq!(c.vision, VitConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.fusion.no_fusion = true;
        c.train.max_steps = Some(7);
        assert_eq!(RunConfig::parse(&c.to_toml(), Path::new("c.toml")).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let err = RunConfig::parse("[vision]\ndim = 64\n\n[fusion]\nblokcs = 2\n", Path::new("c.toml")).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 5);
                assert!(message.contains("blokcs"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
