use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{BehaviorKind, ControllerKind, MachineKind};
use crate::aml::{resolve_path, CaexDocument, MAX_DEPTH};

pub const ROLE_MAPPING_SCHEMA: &str = "rolemapping/1";

const DEFAULT_MAPPING: &str = include_str!("../../fixtures/role_mapping.json");

/// What an element with a given role becomes in the plant config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoleTarget {
    Machine {
        kind: MachineKind,
        #[serde(default)]
        behavior: BehaviorKind,
    },
    Controller {
        kind: ControllerKind,
    },
    /// A programmed control function hosted by a controller.
    Function,
    Zone,
    Ignore,
}

/// Table from CAEX role-class paths to extraction targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleMapping {
    pub schema: String,
    pub roles: BTreeMap<String, RoleTarget>,
}

#[derive(Debug, thiserror::Error)]
pub enum RoleMappingError {
    #[error("role mapping JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported role mapping schema {0:?}")]
    Schema(String),
}

impl Default for RoleMapping {
    fn default() -> Self {
        RoleMapping::from_json(DEFAULT_MAPPING).expect("bundled role mapping is valid")
    }
}

impl RoleMapping {
    pub fn from_json(text: &str) -> Result<Self, RoleMappingError> {
        let m: RoleMapping = serde_json::from_str(text)?;
        if m.schema != ROLE_MAPPING_SCHEMA {
            return Err(RoleMappingError::Schema(m.schema));
        }
        Ok(m)
    }

    /// Looks up a role path, walking `RefBaseClassPath` parents in the
    /// document's role libraries until a mapped ancestor is found.
    pub fn lookup(&self, doc: &CaexDocument, role_path: &str) -> Option<RoleTarget> {
        let mut path = role_path.to_string();
        for _ in 0..MAX_DEPTH {
            if let Some(t) = self.roles.get(&path) {
                return Some(*t);
            }
            let class = resolve_path(doc, &path).class()?;
            path = class.ref_base_class_path.clone()?;
        }
        None
    }
}
