//! URL-safe identifiers.

use std::collections::BTreeSet;

/// Lower snake-case slug: `HighBayWarehouse` -> `high_bay_warehouse`, `ROS_RasPI` -> `ros_ras_pi`.
pub fn slug(name: &str) -> String {
    let chars: Vec<char> = name.chars().collect();
    let mut out = String::with_capacity(name.len() + 4);
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_alphanumeric() {
            if c.is_ascii_uppercase() && i > 0 {
                let prev = chars[i - 1];
                let next_lower = chars.get(i + 1).is_some_and(|n| n.is_ascii_lowercase());
                if prev.is_ascii_lowercase() || prev.is_ascii_digit() || (prev.is_ascii_uppercase() && next_lower) {
                    push_sep(&mut out);
                }
            }
            out.push(c.to_ascii_lowercase());
        } else {
            push_sep(&mut out);
        }
    }
    let trimmed = out.trim_matches('_').to_string();
    if trimmed.is_empty() {
        "item".to_string()
    } else {
        trimmed
    }
}

fn push_sep(out: &mut String) {
    if !out.is_empty() && !out.ends_with('_') {
        out.push('_');
    }
}

/// Allocates slugs that are unique within one namespace, suffixing `_2`, `_3`, ... on collision.
#[derive(Debug, Default)]
pub struct IdAllocator {
    used: BTreeSet<String>,
}

impl IdAllocator {
    pub fn allocate(&mut self, name: &str) -> String {
        let base = slug(name);
        let mut candidate = base.clone();
        let mut n = 2;
        while self.used.contains(&candidate) {
            candidate = format!("{base}_{n}");
            n += 1;
        }
        self.used.insert(candidate.clone());
        candidate
    }
}

/// True when `s` is a non-empty run of `[a-z0-9_.-]`.
pub fn is_url_safe(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'_' | b'.' | b'-'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("HighBayWarehouse"), "high_bay_warehouse");
        assert_eq!(slug("PLC1"), "plc1");
        assert_eq!(slug("ROS_RasPI"), "ros_ras_pi");
        assert_eq!(slug("MillAndDrill"), "mill_and_drill");
        assert_eq!(slug("Demo Plant!"), "demo_plant");
        assert_eq!(slug("***"), "item");
    }

    #[test]
    fn allocator_suffixes() {
        let mut ids = IdAllocator::default();
        assert_eq!(ids.allocate("Conveyor"), "conveyor");
        assert_eq!(ids.allocate("conveyor"), "conveyor_2");
        assert_eq!(ids.allocate("Conveyor"), "conveyor_3");
    }
}
