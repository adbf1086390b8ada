use serde::Serialize;

/// Parsed CAEX document: instance hierarchies plus the three class library kinds.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CaexDocument {
    pub file_name: String,
    pub schema_version: Option<String>,
    pub instance_hierarchies: Vec<InstanceHierarchy>,
    pub role_class_libs: Vec<ClassLib>,
    pub system_unit_class_libs: Vec<ClassLib>,
    pub interface_class_libs: Vec<ClassLib>,
    /// Elements outside the supported subset that were skipped, by element path.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct InstanceHierarchy {
    pub name: String,
    pub internal_elements: Vec<InternalElement>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct InternalElement {
    pub id: String,
    pub name: String,
    pub ref_base_system_unit_path: Option<String>,
    pub role_requirements: Vec<String>,
    pub attributes: Vec<AmlAttribute>,
    pub external_interfaces: Vec<ExternalInterface>,
    pub children: Vec<InternalElement>,
    pub internal_links: Vec<InternalLink>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AmlAttribute {
    pub name: String,
    pub data_type: Option<String>,
    pub value: Option<String>,
    pub children: Vec<AmlAttribute>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ExternalInterface {
    pub id: String,
    pub name: String,
    pub ref_base_class_path: String,
    pub attributes: Vec<AmlAttribute>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct InternalLink {
    pub name: String,
    pub side_a: String,
    pub side_b: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LibKind {
    RoleClass,
    SystemUnitClass,
    InterfaceClass,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassLib {
    pub name: String,
    pub kind: LibKind,
    pub classes: Vec<ClassNode>,
}

/// A RoleClass, SystemUnitClass or InterfaceClass. Nested classes are children.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ClassNode {
    pub name: String,
    /// Full CAEX path, `Lib/Class/SubClass`.
    pub path: String,
    pub ref_base_class_path: Option<String>,
    pub attributes: Vec<AmlAttribute>,
    pub external_interfaces: Vec<ExternalInterface>,
    pub internal_elements: Vec<InternalElement>,
    pub internal_links: Vec<InternalLink>,
    pub children: Vec<ClassNode>,
}

impl AmlAttribute {
    pub fn child(&self, name: &str) -> Option<&AmlAttribute> {
        find_attribute(&self.children, name)
    }
}

/// Case-insensitive attribute lookup.
pub fn find_attribute<'a>(attrs: &'a [AmlAttribute], name: &str) -> Option<&'a AmlAttribute> {
    attrs.iter().find(|a| a.name.eq_ignore_ascii_case(name))
}

impl InternalElement {
    pub fn attribute(&self, name: &str) -> Option<&AmlAttribute> {
        find_attribute(&self.attributes, name)
    }

    pub fn attribute_value(&self, name: &str) -> Option<&str> {
        self.attribute(name).and_then(|a| a.value.as_deref())
    }

    pub fn interface(&self, name: &str) -> Option<&ExternalInterface> {
        self.external_interfaces.iter().find(|i| i.name == name)
    }
}

impl ExternalInterface {
    pub fn attribute_value(&self, name: &str) -> Option<&str> {
        find_attribute(&self.attributes, name).and_then(|a| a.value.as_deref())
    }
}

/// Depth-first visitor over an element tree, passing the slash-separated path of each element.
pub fn walk_elements<'a, F>(prefix: &str, elements: &'a [InternalElement], f: &mut F)
where
    F: FnMut(&str, &'a InternalElement, &[&'a InternalElement]),
{
    fn go<'a, F>(prefix: &str, elements: &'a [InternalElement], ancestors: &mut Vec<&'a InternalElement>, f: &mut F)
    where
        F: FnMut(&str, &'a InternalElement, &[&'a InternalElement]),
    {
        for ie in elements {
            let path = format!("{prefix}/{}", ie.name);
            f(&path, ie, ancestors);
            ancestors.push(ie);
            go(&path, &ie.children, ancestors, f);
            ancestors.pop();
        }
    }
    let mut ancestors = Vec::new();
    go(prefix, elements, &mut ancestors, f);
}

impl CaexDocument {
    /// Visits every InternalElement in the instance hierarchies in document order.
    pub fn for_each_instance<'a, F>(&'a self, mut f: F)
    where
        F: FnMut(&str, &'a InternalElement, &[&'a InternalElement]),
    {
        for ih in &self.instance_hierarchies {
            walk_elements(&ih.name, &ih.internal_elements, &mut f);
        }
    }

    pub fn libraries(&self) -> impl Iterator<Item = &ClassLib> {
        self.role_class_libs
            .iter()
            .chain(&self.system_unit_class_libs)
            .chain(&self.interface_class_libs)
    }

    pub fn element_count(&self) -> usize {
        let mut n = 0;
        self.for_each_instance(|_, _, _| n += 1);
        n
    }
}
