use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use core::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Enc,
    Mid,
    Dec,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Enc, Level::Mid, Level::Dec];

    pub fn name(self) -> &'static str {
        match self {
            Level::Enc => "enc",
            Level::Mid => "mid",
            Level::Dec => "dec",
        }
    }
}

/// Address of one attention block: `(level, block index)`. Written
/// `enc.0`, `mid.1`, `dec.1`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub level: Level,
    pub block: usize,
}

impl LayerId {
    pub const fn new(level: Level, block: usize) -> Self {
        Self { level, block }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (lvl, blk) = s.split_once('.')?;
        let level = Level::ALL.into_iter().find(|l| l.name() == lvl)?;
        Some(Self::new(level, blk.parse().ok()?))
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.level.name(), self.block)
    }
}

/// Hook into the attention internals of a forward pass.
///
/// Within a block the self-attention hook runs before the cross-attention
/// hook, and blocks are visited in forward order. Returning `true` means the
/// tensor was modified and must replace the native one.
pub trait AttentionControl {
    /// `values` is `[J, n, d]`: the self-attention values of every frame.
    fn self_values(&mut self, _layer: LayerId, _values: &mut Tensor) -> Result<bool> {
        Ok(false)
    }

    /// `logits` is `[J, n, L]`: pre-softmax `QK^T / sqrt(d)` per frame.
    fn cross_logits(&mut self, _layer: LayerId, _logits: &mut Tensor) -> Result<bool> {
        Ok(false)
    }
}

pub struct NoControl;

impl AttentionControl for NoControl {}

/// Fixed replacements of cross-attention logits and/or self-attention values.
#[derive(Debug, Clone, Default)]
pub struct OverridePlan {
    pub cross: BTreeMap<LayerId, Tensor>,
    pub values: BTreeMap<LayerId, Tensor>,
}

impl OverridePlan {
    /// Fails on layers the model does not have.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let layers = config.layers();
        for id in self.cross.keys().chain(self.values.keys()) {
            if !layers.contains(id) {
                return Err(Error::UnknownLayer(id.to_string()));
            }
        }
        Ok(())
    }
}

fn replace(slot: Option<&Tensor>, layer: LayerId, target: &mut Tensor) -> Result<bool> {
    let Some(r) = slot else { return Ok(false) };
    if r.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "override for {layer} has shape {:?}, layer produces {:?}",
            r.shape(),
            target.shape()
        )));
    }
    target.data_mut().copy_from_slice(r.data());
    Ok(true)
}

impl AttentionControl for OverridePlan {
    fn self_values(&mut self, layer: LayerId, values: &mut Tensor) -> Result<bool> {
        replace(self.values.get(&layer), layer, values)
    }

    fn cross_logits(&mut self, layer: LayerId, logits: &mut Tensor) -> Result<bool> {
        replace(self.cross.get(&layer), layer, logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_id_roundtrip() {
        let id = LayerId::new(Level::Dec, 1);
        assert_eq!(id.to_string(), "dec.1");
        assert_eq!(LayerId::parse("dec.1"), Some(id));
        assert_eq!(LayerId::parse("up.1"), None);
    }

    #[test]
    fn plan_rejects_unknown_layers() {
        let mut plan = OverridePlan::default();
        plan.cross.insert(LayerId::new(Level::Dec, 7), Tensor::zeros(&[1]));
        assert!(matches!(
            plan.validate(&ModelConfig::default()),
            Err(Error::UnknownLayer(_))
        ));
    }
}
