//! CAEX reader built on roxmltree.
//!
//! Elements are matched by local name so both the 2.15 and the 3.0 namespaces
//! are accepted. Everything outside the supported subset is skipped and noted
//! in [`CaexDocument::skipped`].

use std::collections::HashMap;

use roxmltree::Node;

use super::model::*;
use super::{AmlError, StructureIssue};

/// Maximum element/attribute nesting accepted by the reader.
pub const MAX_DEPTH: usize = 64;
/// Maximum number of `Attribute` children on a single element.
pub const MAX_ATTRIBUTES: usize = 10_000;
/// Raw XML nesting rejected before tree construction. The XML tokenizer
/// recurses per level, so this bounds stack use on hostile input.
pub const MAX_XML_DEPTH: usize = 100;

struct Reader {
    issues: Vec<StructureIssue>,
    skipped: Vec<String>,
    /// id -> first element path that declared it
    ids: HashMap<String, String>,
}

impl Reader {
    fn issue(&mut self, path: &str, message: impl Into<String>) {
        self.issues.push(StructureIssue {
            element_path: path.to_string(),
            message: message.into(),
        });
    }

    fn skip(&mut self, path: &str, node: Node) {
        let note = format!("{path}/{}", node.tag_name().name());
        log::debug!("skipping unsupported CAEX element {note}");
        self.skipped.push(note);
    }

    fn required<'a>(&mut self, node: Node<'a, '_>, attr: &str, path: &str) -> Option<&'a str> {
        match node.attribute(attr) {
            Some(v) if !v.trim().is_empty() => Some(v),
            _ => {
                self.issue(
                    path,
                    format!("<{}> is missing required attribute {attr}", node.tag_name().name()),
                );
                None
            }
        }
    }

    fn register_id(&mut self, id: &str, path: &str) {
        if let Some(first) = self.ids.get(id) {
            let first = first.clone();
            self.issue(path, format!("duplicate ID {id}: already used by {first}"));
        } else {
            self.ids.insert(id.to_string(), path.to_string());
        }
    }
}

fn elements<'a, 'i>(node: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    node.children().filter(|n| n.is_element())
}

fn local<'a>(node: Node<'a, '_>) -> &'a str {
    node.tag_name().name()
}

/// Parses CAEX XML text into a [`CaexDocument`].
pub fn parse_caex(xml_text: &str) -> Result<CaexDocument, AmlError> {
    if let Some((line, column)) = xml_depth_violation(xml_text, MAX_XML_DEPTH) {
        return Err(AmlError::Syntax {
            line,
            column,
            message: format!("element nesting deeper than {MAX_XML_DEPTH}"),
        });
    }
    let opts = roxmltree::ParsingOptions {
        allow_dtd: false,
        ..Default::default()
    };
    let xml = roxmltree::Document::parse_with_options(xml_text, opts).map_err(|e| {
        let pos = e.pos();
        AmlError::Syntax {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;
    let root = xml.root_element();
    if local(root) != "CAEXFile" {
        return Err(AmlError::Structure {
            issues: vec![StructureIssue {
                element_path: local(root).to_string(),
                message: format!("expected root element CAEXFile, found {}", local(root)),
            }],
        });
    }

    let mut reader = Reader {
        issues: Vec::new(),
        skipped: Vec::new(),
        ids: HashMap::new(),
    };
    let mut doc = CaexDocument {
        file_name: root.attribute("FileName").unwrap_or_default().to_string(),
        schema_version: root.attribute("SchemaVersion").map(str::to_string),
        ..Default::default()
    };

    let mut top_names: HashMap<String, ()> = HashMap::new();
    for child in elements(root) {
        let kind = match local(child) {
            "InstanceHierarchy" => None,
            "RoleClassLib" => Some(LibKind::RoleClass),
            "SystemUnitClassLib" => Some(LibKind::SystemUnitClass),
            "InterfaceClassLib" => Some(LibKind::InterfaceClass),
            _ => {
                reader.skip("CAEXFile", child);
                continue;
            }
        };
        let Some(name) = reader.required(child, "Name", &format!("CAEXFile/{}", local(child))) else {
            continue;
        };
        if top_names.insert(format!("{kind:?}/{name}"), ()).is_some() {
            reader.issue(name, format!("duplicate top-level name {name}"));
        }
        match kind {
            None => {
                let ih = read_hierarchy(&mut reader, child, name);
                doc.instance_hierarchies.push(ih);
            }
            Some(kind) => {
                let lib = read_lib(&mut reader, child, name, kind);
                match kind {
                    LibKind::RoleClass => doc.role_class_libs.push(lib),
                    LibKind::SystemUnitClass => doc.system_unit_class_libs.push(lib),
                    LibKind::InterfaceClass => doc.interface_class_libs.push(lib),
                }
            }
        }
    }

    doc.skipped = reader.skipped;
    if reader.issues.is_empty() {
        Ok(doc)
    } else {
        Err(AmlError::Structure { issues: reader.issues })
    }
}

fn read_hierarchy(reader: &mut Reader, node: Node, name: &str) -> InstanceHierarchy {
    let mut ih = InstanceHierarchy {
        name: name.to_string(),
        internal_elements: Vec::new(),
    };
    for child in elements(node) {
        match local(child) {
            "InternalElement" => {
                if let Some(ie) = read_element(reader, child, name, 1) {
                    ih.internal_elements.push(ie);
                }
            }
            _ => reader.skip(name, child),
        }
    }
    check_sibling_names(reader, name, ih.internal_elements.iter().map(|e| e.name.as_str()));
    ih
}

fn check_sibling_names<'a>(reader: &mut Reader, parent: &str, names: impl Iterator<Item = &'a str>) {
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for n in names {
        if seen.insert(n, ()).is_some() {
            reader.issue(
                &format!("{parent}/{n}"),
                format!("sibling name {n} is not unique under {parent}"),
            );
        }
    }
}

fn depth_exceeded(reader: &mut Reader, path: &str, depth: usize) -> bool {
    if depth > MAX_DEPTH {
        reader.issue(path, format!("nesting depth exceeds {MAX_DEPTH}"));
        true
    } else {
        false
    }
}

fn read_element(reader: &mut Reader, node: Node, parent_path: &str, depth: usize) -> Option<InternalElement> {
    let name = node.attribute("Name").unwrap_or_default();
    let path = format!("{parent_path}/{name}");
    if depth_exceeded(reader, &path, depth) {
        return None;
    }
    let name = reader.required(node, "Name", &path)?;
    let id = reader.required(node, "ID", &path);
    if let Some(id) = id {
        reader.register_id(id, &path);
    }
    let mut ie = InternalElement {
        id: id.unwrap_or_default().to_string(),
        name: name.to_string(),
        ref_base_system_unit_path: node.attribute("RefBaseSystemUnitPath").map(str::to_string),
        ..Default::default()
    };
    let mut attr_count = 0usize;
    for child in elements(node) {
        match local(child) {
            "Attribute" => {
                attr_count += 1;
                if attr_count > MAX_ATTRIBUTES {
                    if attr_count == MAX_ATTRIBUTES + 1 {
                        reader.issue(&path, format!("more than {MAX_ATTRIBUTES} attributes"));
                    }
                    continue;
                }
                if let Some(a) = read_attribute(reader, child, &path, depth + 1) {
                    ie.attributes.push(a);
                }
            }
            "ExternalInterface" => {
                if let Some(ei) = read_interface(reader, child, &path, true) {
                    ie.external_interfaces.push(ei);
                }
            }
            "InternalElement" => {
                if let Some(c) = read_element(reader, child, &path, depth + 1) {
                    ie.children.push(c);
                }
            }
            "InternalLink" => {
                if let Some(l) = read_link(reader, child, &path) {
                    ie.internal_links.push(l);
                }
            }
            "RoleRequirements" => match child.attribute("RefBaseRoleClassPath") {
                Some(p) if !p.is_empty() => ie.role_requirements.push(p.to_string()),
                _ => reader.issue(&path, "RoleRequirements without RefBaseRoleClassPath"),
            },
            _ => reader.skip(&path, child),
        }
    }
    check_sibling_names(reader, &path, ie.children.iter().map(|c| c.name.as_str()));
    Some(ie)
}

fn read_attribute(reader: &mut Reader, node: Node, parent_path: &str, depth: usize) -> Option<AmlAttribute> {
    let path = format!("{parent_path}@{}", node.attribute("Name").unwrap_or_default());
    if depth_exceeded(reader, &path, depth) {
        return None;
    }
    let name = reader.required(node, "Name", &path)?;
    let mut attr = AmlAttribute {
        name: name.to_string(),
        data_type: node.attribute("AttributeDataType").map(str::to_string),
        value: None,
        children: Vec::new(),
    };
    let mut count = 0usize;
    for child in elements(node) {
        match local(child) {
            "Value" => attr.value = Some(child.text().unwrap_or_default().trim().to_string()),
            "Attribute" => {
                count += 1;
                if count > MAX_ATTRIBUTES {
                    if count == MAX_ATTRIBUTES + 1 {
                        reader.issue(&path, format!("more than {MAX_ATTRIBUTES} attributes"));
                    }
                    continue;
                }
                if let Some(a) = read_attribute(reader, child, &path, depth + 1) {
                    attr.children.push(a);
                }
            }
            _ => reader.skip(&path, child),
        }
    }
    Some(attr)
}

fn read_interface(reader: &mut Reader, node: Node, parent_path: &str, instance: bool) -> Option<ExternalInterface> {
    let path = format!("{parent_path}:{}", node.attribute("Name").unwrap_or_default());
    let name = reader.required(node, "Name", &path)?;
    let id = if instance {
        let id = reader.required(node, "ID", &path);
        if let Some(id) = id {
            reader.register_id(id, &path);
        }
        id.unwrap_or_default()
    } else {
        node.attribute("ID").unwrap_or_default()
    };
    let class = if instance {
        reader.required(node, "RefBaseClassPath", &path).unwrap_or_default()
    } else {
        node.attribute("RefBaseClassPath").unwrap_or_default()
    };
    let mut ei = ExternalInterface {
        id: id.to_string(),
        name: name.to_string(),
        ref_base_class_path: class.to_string(),
        attributes: Vec::new(),
    };
    for child in elements(node) {
        match local(child) {
            "Attribute" => {
                if ei.attributes.len() >= MAX_ATTRIBUTES {
                    continue;
                }
                if let Some(a) = read_attribute(reader, child, &path, 2) {
                    ei.attributes.push(a);
                }
            }
            _ => reader.skip(&path, child),
        }
    }
    Some(ei)
}

fn read_link(reader: &mut Reader, node: Node, parent_path: &str) -> Option<InternalLink> {
    let path = format!("{parent_path}/{}", node.attribute("Name").unwrap_or("<link>"));
    let name = reader.required(node, "Name", &path);
    let a = reader.required(node, "RefPartnerSideA", &path);
    let b = reader.required(node, "RefPartnerSideB", &path);
    Some(InternalLink {
        name: name?.to_string(),
        side_a: a?.to_string(),
        side_b: b?.to_string(),
    })
}

fn read_lib(reader: &mut Reader, node: Node, name: &str, kind: LibKind) -> ClassLib {
    let class_tag = match kind {
        LibKind::RoleClass => "RoleClass",
        LibKind::SystemUnitClass => "SystemUnitClass",
        LibKind::InterfaceClass => "InterfaceClass",
    };
    let mut lib = ClassLib {
        name: name.to_string(),
        kind,
        classes: Vec::new(),
    };
    for child in elements(node) {
        if local(child) == class_tag {
            if let Some(c) = read_class(reader, child, name, class_tag, 1) {
                lib.classes.push(c);
            }
        } else {
            reader.skip(name, child);
        }
    }
    check_sibling_names(reader, name, lib.classes.iter().map(|c| c.name.as_str()));
    lib
}

fn read_class(reader: &mut Reader, node: Node, parent_path: &str, class_tag: &str, depth: usize) -> Option<ClassNode> {
    let path = format!("{parent_path}/{}", node.attribute("Name").unwrap_or_default());
    if depth_exceeded(reader, &path, depth) {
        return None;
    }
    let name = reader.required(node, "Name", &path)?;
    let base = node
        .attribute("RefBaseClassPath")
        .filter(|p| !p.is_empty())
        .map(str::to_string);
    let mut class = ClassNode {
        name: name.to_string(),
        path: path.clone(),
        ref_base_class_path: base,
        ..Default::default()
    };
    for child in elements(node) {
        match local(child) {
            t if t == class_tag => {
                if let Some(c) = read_class(reader, child, &path, class_tag, depth + 1) {
                    class.children.push(c);
                }
            }
            "Attribute" => {
                if class.attributes.len() >= MAX_ATTRIBUTES {
                    continue;
                }
                if let Some(a) = read_attribute(reader, child, &path, depth + 1) {
                    class.attributes.push(a);
                }
            }
            "ExternalInterface" => {
                if let Some(ei) = read_interface(reader, child, &path, false) {
                    class.external_interfaces.push(ei);
                }
            }
            "InternalElement" => {
                if let Some(ie) = read_element(reader, child, &path, depth + 1) {
                    class.internal_elements.push(ie);
                }
            }
            "InternalLink" => {
                if let Some(l) = read_link(reader, child, &path) {
                    class.internal_links.push(l);
                }
            }
            _ => reader.skip(&path, child),
        }
    }
    check_sibling_names(reader, &path, class.children.iter().map(|c| c.name.as_str()));
    Some(class)
}

/// Iterative scan for the first start tag nested deeper than `limit`.
/// Malformed input is left for the XML parser to report.
pub(crate) fn xml_depth_violation(text: &str, limit: usize) -> Option<(u32, u32)> {
    let b = text.as_bytes();
    let skip_to = |from: usize, pat: &[u8]| -> usize {
        b[from..]
            .windows(pat.len())
            .position(|w| w == pat)
            .map_or(b.len(), |p| from + p + pat.len())
    };
    let mut depth = 0usize;
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'<' {
            i += 1;
            continue;
        }
        let rest = &b[i..];
        if rest.starts_with(b"<!--") {
            i = skip_to(i + 4, b"-->");
        } else if rest.starts_with(b"<![CDATA[") {
            i = skip_to(i + 9, b"]]>");
        } else if rest.starts_with(b"<?") {
            i = skip_to(i + 2, b"?>");
        } else if rest.starts_with(b"<!") || rest.starts_with(b"</") {
            if rest.starts_with(b"</") {
                depth = depth.saturating_sub(1);
            }
            i = skip_to(i + 2, b">");
        } else {
            let start = i;
            let mut quote = None;
            let mut j = i + 1;
            while j < b.len() {
                match (quote, b[j]) {
                    (None, q @ (b'"' | b'\'')) => quote = Some(q),
                    (Some(q), c) if c == q => quote = None,
                    (None, b'>') => break,
                    _ => {}
                }
                j += 1;
            }
            if j < b.len() && b[j - 1] != b'/' {
                depth += 1;
                if depth > limit {
                    let before = &text[..start];
                    let line = before.matches('\n').count() as u32 + 1;
                    let column = (start - before.rfind('\n').map_or(0, |p| p + 1)) as u32 + 1;
                    return Some((line, column));
                }
            }
            i = j + 1;
        }
    }
    None
}
