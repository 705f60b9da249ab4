//! Layer shapes of real model families, for exact parameter accounting.
//!
//! The catalog ships as `data/shape_catalog.json` and is compiled in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../data/shape_catalog.json");

/// One projection repeated in every transformer layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Projection {
    pub name: String,
    pub d: usize,
    pub k: usize,
}

/// A named set of adapter slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grouping {
    pub name: String,
    /// True when the composition is a guess rather than documented.
    pub inferred: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub projections: Vec<Projection>,
}

/// One adapter slot of a catalog model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotShape {
    pub slot_id: usize,
    pub layer: usize,
    pub projection: String,
    pub d: usize,
    pub k: usize,
}

impl SlotShape {
    pub fn name(&self) -> String {
        format!("layer{}.{}", self.layer, self.projection)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShapes {
    pub model_name: String,
    pub total_params: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_params_note: Option<String>,
    pub n_layers: usize,
    pub groupings: Vec<Grouping>,
}

impl ModelShapes {
    pub fn grouping(&self, name: &str) -> Result<&Grouping> {
        self.groupings.iter().find(|g| g.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.groupings.iter().map(|g| g.name.as_str()).collect();
            Error::config(
                "grouping",
                format!(
                    "unknown grouping `{name}` for {} (known: {})",
                    self.model_name,
                    known.join(", ")
                ),
            )
        })
    }

    /// Slots of `grouping`, layer-major: all projections of layer 0 first.
    pub fn slots(&self, grouping: &str) -> Result<Vec<SlotShape>> {
        let g = self.grouping(grouping)?;
        let mut out = Vec::with_capacity(self.n_layers * g.projections.len());
        for layer in 0..self.n_layers {
            for p in &g.projections {
                out.push(SlotShape {
                    slot_id: out.len(),
                    layer,
                    projection: p.name.clone(),
                    d: p.d,
                    k: p.k,
                });
            }
        }
        Ok(out)
    }
}

/// All catalog models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeCatalog {
    pub version: u32,
    pub models: Vec<ModelShapes>,
}

impl ShapeCatalog {
    /// The catalog compiled into the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("builtin shape catalog is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cat: Self = serde_json::from_str(text)?;
        for m in &cat.models {
            for g in &m.groupings {
                if let Some(p) = g.projections.iter().find(|p| p.d == 0 || p.k == 0) {
                    return Err(Error::config(
                        "catalog",
                        format!("{}/{}/{} has a zero dimension", m.model_name, g.name, p.name),
                    ));
                }
            }
        }
        Ok(cat)
    }

    pub fn model(&self, name: &str) -> Result<&ModelShapes> {
        self.models.iter().find(|m| m.model_name == name).ok_or_else(|| {
            let known: Vec<&str> = self.models.iter().map(|m| m.model_name.as_str()).collect();
            Error::config(
                "catalog",
                format!("unknown catalog `{name}` (known: {})", known.join(", ")),
            )
        })
    }
}
