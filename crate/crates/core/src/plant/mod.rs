//! The plant configuration: machines, controllers, capabilities and their
//! protocol bindings, extracted from a CAEX document.

mod codec;
mod diff;
mod extract;
mod model;
mod roles;

pub use codec::{check_integrity, deserialize_config, serialize_config, ConfigError, Violation, PLANT_CONFIG_SCHEMA};
pub use diff::{diff_configs, ChangeSet, EntityChanges};
pub use extract::{
    extract_plant_config, Accounting, ExtractError, ExtractErrors, Extraction, SkipReason, SkippedElement,
    DEFAULT_NOMINAL_DURATION_S, MAX_MODBUS_PARAMS, REGISTER_BLOCK,
};
pub use model::*;
pub use roles::{RoleMapping, RoleMappingError, RoleTarget, ROLE_MAPPING_SCHEMA};
