// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named activation sites, patch sets and activation caches.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Residual stream entering a block.
    ResidPre,
    /// Residual stream leaving a block.
    ResidPost,
    /// Per-head attention value mix, before the output projection.
    AttnZ,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    All,
    At(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    pub kind: SiteKind,
    pub layer: usize,
    pub head: Option<usize>,
    pub position: Position,
}

impl HookSite {
    pub fn resid_pre(layer: usize, position: Position) -> Self {
        Self {
            kind: SiteKind::ResidPre,
            layer,
            head: None,
            position,
        }
    }

    pub fn resid_post(layer: usize, position: Position) -> Self {
        Self {
            kind: SiteKind::ResidPost,
            layer,
            head: None,
            position,
        }
    }

    pub fn attn_z(layer: usize, head: usize, position: Position) -> Self {
        Self {
            kind: SiteKind::AttnZ,
            layer,
            head: Some(head),
            position,
        }
    }

    /// Check the site against the architecture and a sequence length.
    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<(), ModelError> {
        let bad = || Err(ModelError::InvalidSite(self.to_string()));
        if self.layer >= config.n_layers {
            return bad();
        }
        match (self.kind, self.head) {
            (SiteKind::AttnZ, Some(h)) if h < config.n_heads => {}
            (SiteKind::ResidPre | SiteKind::ResidPost, None) => {}
            _ => return bad(),
        }
        if let Position::At(p) = self.position {
            if p >= seq_len {
                return bad();
            }
        }
        Ok(())
    }

    /// Row width of the activation at this site.
    pub fn width(&self, config: &ModelConfig) -> usize {
        match self.kind {
            SiteKind::AttnZ => config.d_head(),
            _ => config.d_model,
        }
    }

    /// Natural replacement shape: `[width]` for one position, `[seq × width]` for all.
    pub fn natural_shape(&self, config: &ModelConfig, seq_len: usize) -> Vec<usize> {
        match self.position {
            Position::At(_) => vec![self.width(config)],
            Position::All => vec![seq_len, self.width(config)],
        }
    }

    /// First position this site touches.
    pub fn first_position(&self) -> usize {
        match self.position {
            Position::All => 0,
            Position::At(p) => p,
        }
    }

    fn slot(&self) -> (SiteKind, usize, Option<usize>) {
        (self.kind, self.layer, self.head)
    }

    fn overlaps(&self, other: &HookSite) -> bool {
        self.slot() == other.slot()
            && match (self.position, other.position) {
                (Position::At(a), Position::At(b)) => a == b,
                _ => true,
            }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            SiteKind::ResidPre => "resid_pre",
            SiteKind::ResidPost => "resid_post",
            SiteKind::AttnZ => "attn_z",
        };
        write!(f, "{kind}.L{}", self.layer)?;
        if let Some(h) = self.head {
            write!(f, "H{h}")?;
        }
        match self.position {
            Position::All => write!(f, "[all]"),
            Position::At(p) => write!(f, "[{p}]"),
        }
    }
}

/// Activation replacements applied during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    patches: Vec<(HookSite, Tensor)>,
}

impl PatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a patch; overlapping sites are rejected.
    pub fn push(&mut self, site: HookSite, value: Tensor) -> Result<(), ModelError> {
        if self.patches.iter().any(|(s, _)| s.overlaps(&site)) {
            return Err(ModelError::DuplicatePatch(site.to_string()));
        }
        self.patches.push((site, value));
        Ok(())
    }

    pub fn with(mut self, site: HookSite, value: Tensor) -> Result<Self, ModelError> {
        self.push(site, value)?;
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(HookSite, Tensor)> {
        self.patches.iter()
    }

    /// Validate every site and replacement shape for a sequence length.
    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<(), ModelError> {
        for (site, value) in &self.patches {
            site.validate(config, seq_len)?;
            let expected = site.natural_shape(config, seq_len);
            if value.shape() != expected.as_slice() {
                return Err(ModelError::PatchShape {
                    site: site.to_string(),
                    expected,
                    found: value.shape().to_vec(),
                });
            }
            value
                .ensure_finite("patch")
                .map_err(|_| ModelError::NonFinite(format!("patch value at {site}")))?;
        }
        Ok(())
    }

    /// Earliest (layer, position) any patch touches, or `None` if empty.
    pub fn frontier(&self) -> Option<(usize, usize)> {
        let layer = self.patches.iter().map(|(s, _)| s.layer).min()?;
        let pos = self.patches.iter().map(|(s, _)| s.first_position()).min()?;
        Some((layer, pos))
    }

    /// Apply matching patches to a buffer of `d_model`-wide rows that starts
    /// at absolute position `first_row`.
    pub(crate) fn apply(
        &self,
        kind: SiteKind,
        layer: usize,
        buf: &mut [f32],
        first_row: usize,
        d_model: usize,
        d_head: usize,
    ) {
        let n_rows = buf.len() / d_model;
        for (site, value) in &self.patches {
            if site.kind != kind || site.layer != layer {
                continue;
            }
            let (offset, width) = match site.head {
                Some(h) => (h * d_head, d_head),
                None => (0, d_model),
            };
            let mut write = |row: usize, src: &[f32]| {
                if row >= first_row && row < first_row + n_rows {
                    let start = (row - first_row) * d_model + offset;
                    buf[start..start + width].copy_from_slice(src);
                }
            };
            match site.position {
                Position::At(p) => write(p, value.data()),
                Position::All => {
                    for (row, src) in value.data().chunks_exact(width).enumerate() {
                        write(row, src);
                    }
                }
            }
        }
    }
}

/// Activations recorded by one forward pass, keyed by site with the
/// position resolved to all rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationCache {
    entries: BTreeMap<(SiteKind, usize, Option<usize>), Tensor>,
    n_layers: usize,
}

impl ActivationCache {
    pub(crate) fn new(n_layers: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            n_layers,
        }
    }

    pub(crate) fn insert(&mut self, kind: SiteKind, layer: usize, head: Option<usize>, value: Tensor) {
        self.entries.insert((kind, layer, head), value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored sites, all positions.
    pub fn sites(&self) -> impl Iterator<Item = HookSite> + '_ {
        self.entries.keys().map(|&(kind, layer, head)| HookSite {
            kind,
            layer,
            head,
            position: Position::All,
        })
    }

    /// Look up a site. `resid_post` of a non-final layer resolves to the
    /// identical `resid_pre` of the next layer.
    pub fn get(&self, site: &HookSite) -> Option<Tensor> {
        let key = match site.kind {
            SiteKind::ResidPost if site.layer + 1 < self.n_layers => (SiteKind::ResidPre, site.layer + 1, None),
            _ => (site.kind, site.layer, site.head),
        };
        let full = self.entries.get(&key)?;
        match site.position {
            Position::All => Some(full.clone()),
            Position::At(p) if p < full.num_rows() => Some(Tensor::vector(full.row(p).to_vec())),
            Position::At(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_patches_rejected() {
        let mut set = PatchSet::new();
        let t = Tensor::vector(vec![0.0; 4]);
        set.push(HookSite::resid_pre(1, Position::At(2)), t.clone()).unwrap();
        set.push(HookSite::resid_pre(1, Position::At(3)), t.clone()).unwrap();
        set.push(HookSite::attn_z(1, 0, Position::At(2)), t.clone()).unwrap();
        assert!(set.push(HookSite::resid_pre(1, Position::At(2)), t.clone()).is_err());
        assert!(set
            .push(HookSite::resid_pre(1, Position::All), Tensor::zeros(vec![5, 4]))
            .is_err());
        assert_eq!(set.frontier(), Some((1, 2)));
    }

    #[test]
    fn site_validation() {
        let c = ModelConfig::gpt2_small();
        assert!(HookSite::attn_z(9, 9, Position::At(14)).validate(&c, 15).is_ok());
        assert!(HookSite::attn_z(9, 12, Position::At(14)).validate(&c, 15).is_err());
        assert!(HookSite::resid_pre(12, Position::All).validate(&c, 15).is_err());
        assert!(HookSite::resid_pre(0, Position::At(15)).validate(&c, 15).is_err());
        let headed = HookSite {
            head: Some(0),
            ..HookSite::resid_pre(0, Position::All)
        };
        assert!(headed.validate(&c, 15).is_err());
        assert_eq!(HookSite::attn_z(9, 9, Position::At(14)).to_string(), "attn_z.L9H9[14]");
    }
}
