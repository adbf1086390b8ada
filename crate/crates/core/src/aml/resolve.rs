use super::model::*;

/// Result of resolving a CAEX path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolved<'a> {
    Library(&'a ClassLib),
    Class(&'a ClassNode),
    Hierarchy(&'a InstanceHierarchy),
    Element(&'a InternalElement),
    NotFound,
}

impl<'a> Resolved<'a> {
    pub fn is_found(&self) -> bool {
        !matches!(self, Resolved::NotFound)
    }

    pub fn element(&self) -> Option<&'a InternalElement> {
        match self {
            Resolved::Element(e) => Some(e),
            _ => None,
        }
    }

    pub fn class(&self) -> Option<&'a ClassNode> {
        match self {
            Resolved::Class(c) => Some(c),
            _ => None,
        }
    }
}

fn segments(path: &str) -> Option<Vec<&str>> {
    let segs: Vec<&str> = path.split('/').collect();
    if segs.iter().any(|s| s.is_empty()) {
        None
    } else {
        Some(segs)
    }
}

/// True when `path` is a syntactically valid CAEX path (non-empty `/`-separated segments).
pub fn is_valid_path(path: &str) -> bool {
    segments(path).is_some()
}

/// Resolves `Lib/Class/SubClass` against the class libraries, then
/// `Hierarchy/Element/Child` against the instance hierarchies. Segments must
/// match exactly; nothing is guessed.
pub fn resolve_path<'a>(doc: &'a CaexDocument, caex_path: &str) -> Resolved<'a> {
    let Some(segs) = segments(caex_path) else {
        return Resolved::NotFound;
    };
    let (head, rest) = segs.split_first().expect("split yields at least one segment");

    for lib in doc.libraries() {
        if lib.name != *head {
            continue;
        }
        if rest.is_empty() {
            return Resolved::Library(lib);
        }
        let mut level = &lib.classes;
        let mut found = None;
        for seg in rest {
            match level.iter().find(|c| c.name == *seg) {
                Some(c) => {
                    found = Some(c);
                    level = &c.children;
                }
                None => {
                    found = None;
                    break;
                }
            }
        }
        if let Some(c) = found {
            return Resolved::Class(c);
        }
    }

    for ih in &doc.instance_hierarchies {
        if ih.name != *head {
            continue;
        }
        if rest.is_empty() {
            return Resolved::Hierarchy(ih);
        }
        if let Some(e) = descend(&ih.internal_elements, rest) {
            return Resolved::Element(e);
        }
    }
    Resolved::NotFound
}

fn descend<'a>(level: &'a [InternalElement], segs: &[&str]) -> Option<&'a InternalElement> {
    let (first, rest) = segs.split_first()?;
    let e = level.iter().find(|e| e.name == *first)?;
    if rest.is_empty() {
        Some(e)
    } else {
        descend(&e.children, rest)
    }
}

/// Finds an InternalElement by ID anywhere in the instance hierarchies.
pub fn find_element_by_id<'a>(doc: &'a CaexDocument, id: &str) -> Option<(String, &'a InternalElement)> {
    let mut hit = None;
    doc.for_each_instance(|path, ie, _| {
        if hit.is_none() && ie.id == id {
            hit = Some((path.to_string(), ie));
        }
    });
    hit
}

/// An interface reference resolved to its owning element.
#[derive(Debug, Clone)]
pub struct InterfaceTarget<'a> {
    pub element_path: String,
    pub element: &'a InternalElement,
    pub interface: &'a ExternalInterface,
}

/// Resolves an InternalLink partner reference.
///
/// Accepted forms: `{element-id}:InterfaceName`, `Hierarchy/Element/Path:InterfaceName`,
/// or the bare ID of the interface itself.
pub fn resolve_interface_ref<'a>(doc: &'a CaexDocument, reference: &str) -> Option<InterfaceTarget<'a>> {
    if let Some((owner, iface)) = reference.rsplit_once(':') {
        let by_id = find_element_by_id(doc, owner);
        let (element_path, element) = match by_id {
            Some(hit) => hit,
            None => {
                let e = resolve_path(doc, owner).element()?;
                (owner.to_string(), e)
            }
        };
        let interface = element.interface(iface)?;
        return Some(InterfaceTarget {
            element_path,
            element,
            interface,
        });
    }
    let mut hit = None;
    doc.for_each_instance(|path, ie, _| {
        if hit.is_some() {
            return;
        }
        if let Some(i) = ie.external_interfaces.iter().find(|i| i.id == reference) {
            hit = Some(InterfaceTarget {
                element_path: path.to_string(),
                element: ie,
                interface: i,
            });
        }
    });
    hit
}
