use serde::Serialize;

use super::model::PlantConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EntityChanges {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub modified: Vec<String>,
}

impl EntityChanges {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty()
    }
}

/// Differences between two configs, keyed by entity id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChangeSet {
    pub machines: EntityChanges,
    pub controllers: EntityChanges,
    pub capabilities: EntityChanges,
    pub zones: EntityChanges,
    /// Top-level fields that differ, plus `<list> order` when only ordering changed.
    pub plant_fields: Vec<String>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.machines.is_empty()
            && self.controllers.is_empty()
            && self.capabilities.is_empty()
            && self.zones.is_empty()
            && self.plant_fields.is_empty()
    }
}

fn compare<T: PartialEq>(
    old: &[T],
    new: &[T],
    id: impl Fn(&T) -> &str,
    label: &str,
    fields: &mut Vec<String>,
) -> EntityChanges {
    let mut ch = EntityChanges::default();
    for o in old {
        match new.iter().find(|n| id(n) == id(o)) {
            None => ch.removed.push(id(o).to_string()),
            Some(n) if n != o => ch.modified.push(id(o).to_string()),
            Some(_) => {}
        }
    }
    for n in new {
        if !old.iter().any(|o| id(o) == id(n)) {
            ch.added.push(id(n).to_string());
        }
    }
    if ch.is_empty() && old != new {
        fields.push(format!("{label} order"));
    }
    ch
}

pub fn diff_configs(old: &PlantConfig, new: &PlantConfig) -> ChangeSet {
    let mut plant_fields = Vec::new();
    if old.plant_id != new.plant_id {
        plant_fields.push("plant_id".to_string());
    }
    if old.plant_name != new.plant_name {
        plant_fields.push("plant_name".to_string());
    }
    if old.metadata != new.metadata {
        plant_fields.push("metadata".to_string());
    }
    let machines = compare(
        &old.machines,
        &new.machines,
        |m| &m.machine_id,
        "machines",
        &mut plant_fields,
    );
    let controllers = compare(
        &old.controllers,
        &new.controllers,
        |c| &c.controller_id,
        "controllers",
        &mut plant_fields,
    );
    let capabilities = compare(
        &old.capabilities,
        &new.capabilities,
        |c| &c.capability_id,
        "capabilities",
        &mut plant_fields,
    );
    let zones = compare(&old.zones, &new.zones, |z| &z.zone_id, "zones", &mut plant_fields);
    ChangeSet {
        machines,
        controllers,
        capabilities,
        zones,
        plant_fields,
    }
}
