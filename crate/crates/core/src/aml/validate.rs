use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::model::*;
use super::resolve::{is_valid_path, resolve_interface_ref, resolve_path};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub element_path: String,
    pub message: String,
}

/// Ordered list of findings. Shared by the AML and BPMN validators.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Error, path, message);
    }

    pub fn warning(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Warning, path, message);
    }

    fn push(&mut self, severity: Severity, path: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding {
            severity,
            element_path: path.into(),
            message: message.into(),
        });
    }
}

/// Checks internal consistency of a parsed document.
///
/// Unresolved class and role references are warnings (they may point at
/// standard libraries that are not embedded); duplicate ids, empty names and
/// dangling InternalLink partners are errors.
pub fn validate_structure(doc: &CaexDocument) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids: HashMap<String, String> = HashMap::new();
    let mut links: Vec<(String, &InternalLink)> = Vec::new();

    let mut check_id = |report: &mut ValidationReport, id: &str, path: &str| {
        if id.is_empty() {
            report.error(path, "empty ID");
        } else if let Some(first) = ids.get(id) {
            report.error(path, format!("duplicate ID {id}: already used by {first}"));
        } else {
            ids.insert(id.to_string(), path.to_string());
        }
    };

    doc.for_each_instance(|path, ie, _| {
        if ie.name.trim().is_empty() {
            report.error(path, "empty element name");
        }
        check_id(&mut report, &ie.id, path);
        if let Some(suc) = &ie.ref_base_system_unit_path {
            if resolve_path(doc, suc).class().is_none() {
                report.warning(
                    path,
                    format!("unresolved external reference RefBaseSystemUnitPath {suc}"),
                );
            }
        }
        for role in &ie.role_requirements {
            if !is_valid_path(role) {
                report.error(path, format!("malformed role path {role:?}"));
            } else if resolve_path(doc, role).class().is_none() {
                report.warning(path, format!("unresolved external reference RoleRequirements {role}"));
            }
        }
        check_attributes(&mut report, path, &ie.attributes);
        for ei in &ie.external_interfaces {
            let ipath = format!("{path}:{}", ei.name);
            if ei.name.trim().is_empty() {
                report.error(&ipath, "empty interface name");
            }
            check_id(&mut report, &ei.id, &ipath);
            check_interface_class(&mut report, doc, &ipath, ei);
        }
        for link in &ie.internal_links {
            links.push((path.to_string(), link));
        }
    });

    for lib in doc.libraries() {
        if lib.name.trim().is_empty() {
            report.error("CAEXFile", "library with empty name");
        }
        let mut stack: Vec<&ClassNode> = lib.classes.iter().collect();
        while let Some(c) = stack.pop() {
            if c.name.trim().is_empty() {
                report.error(&c.path, "empty class name");
            }
            if let Some(base) = &c.ref_base_class_path {
                if resolve_path(doc, base).class().is_none() {
                    report.warning(
                        &c.path,
                        format!("unresolved external reference RefBaseClassPath {base}"),
                    );
                }
            }
            for ei in &c.external_interfaces {
                check_interface_class(&mut report, doc, &format!("{}:{}", c.path, ei.name), ei);
            }
            check_attributes(&mut report, &c.path, &c.attributes);
            stack.extend(c.children.iter());
        }
    }

    for (path, link) in links {
        let lpath = format!("{path}/{}", link.name);
        if link.name.trim().is_empty() {
            report.error(&lpath, "InternalLink with empty name");
        }
        for (side, reference) in [("A", &link.side_a), ("B", &link.side_b)] {
            if resolve_interface_ref(doc, reference).is_none() {
                report.error(
                    &lpath,
                    format!(
                        "InternalLink {} side {side} {reference} does not resolve to an interface",
                        link.name
                    ),
                );
            }
        }
    }
    report
}

fn check_interface_class(report: &mut ValidationReport, doc: &CaexDocument, path: &str, ei: &ExternalInterface) {
    if ei.ref_base_class_path.trim().is_empty() {
        report.error(path, "ExternalInterface without RefBaseClassPath");
    } else if resolve_path(doc, &ei.ref_base_class_path).class().is_none() {
        report.warning(
            path,
            format!(
                "unresolved external reference RefBaseClassPath {}",
                ei.ref_base_class_path
            ),
        );
    }
}

fn check_attributes(report: &mut ValidationReport, path: &str, attrs: &[AmlAttribute]) {
    for a in attrs {
        if a.name.trim().is_empty() {
            report.error(path, "attribute with empty name");
        }
        check_attributes(report, &format!("{path}@{}", a.name), &a.children);
    }
}
