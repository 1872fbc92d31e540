//! Reading and writing the profile and transformation-catalog XML documents.
//!
//! Catalog documents look like
//!
//! ```xml
//! <transformations>
//!   <transform id="XBM->PNG" description="Transform XBM->PNG">
//!     <mimetypesource>image/x-xbitmap</mimetypesource>
//!     <mimetypetarget>image/png</mimetypetarget>
//!     <library>TRImageMagick</library>
//!   </transform>
//! </transformations>
//! ```
//!
//! and profile documents are one or more `<profile id="..">` elements holding
//! `<transform id=".." rule=".."/>` children, either as bare siblings or inside
//! a `<profiles>` root.

use std::fmt::Write as _;

use roxmltree::{Document, Node};

use super::{Profile, ProfileRule, ProfileSet, RulesError, TransformCatalog, TransformDef};
use crate::media::MediaType;

const SYNTHETIC_ROOT: &str = "grace-profile-document";

pub fn parse_transformations(xml: &str) -> Result<TransformCatalog, RulesError> {
    let doc = Document::parse(xml).map_err(|e| parse_error(e, 0))?;
    let root = doc.root_element();
    if root.tag_name().name() != "transformations" {
        return Err(RulesError::Schema(format!(
            "expected root <transformations>, found <{}>",
            root.tag_name().name()
        )));
    }

    let mut catalog = TransformCatalog::new();
    for node in root.children().filter(Node::is_element) {
        expect_tag(&node, "transform")?;
        let id = required_attr(&node, "id")?;
        let description = node.attribute("description").unwrap_or_default();
        let source = media_child(&node, "mimetypesource", id)?;
        let target = media_child(&node, "mimetypetarget", id)?;
        let library = child_text(&node, "library", id)?;
        catalog.insert(TransformDef::new(id, description, source, target, library)?)?;
    }
    Ok(catalog)
}

/// Parses a profile document and validates every profile against `catalog`.
pub fn parse_profiles(xml: &str, catalog: &TransformCatalog) -> Result<ProfileSet, RulesError> {
    let body = blank_declaration(xml.strip_prefix('\u{feff}').unwrap_or(xml));
    let open = format!("<{SYNTHETIC_ROOT}>");
    let wrapped = format!("{open}{body}</{SYNTHETIC_ROOT}>");
    let doc = Document::parse(&wrapped).map_err(|e| parse_error(e, open.len() as u32))?;

    let elements: Vec<Node> = doc.root_element().children().filter(Node::is_element).collect();
    let profile_nodes: Vec<Node> = match elements.as_slice() {
        [single] if single.tag_name().name() == "profiles" => {
            single.children().filter(Node::is_element).collect()
        }
        _ => elements,
    };

    let mut set = ProfileSet::new();
    for node in profile_nodes {
        expect_tag(&node, "profile")?;
        let id = required_attr(&node, "id")?;
        let mut rules = Vec::new();
        for t in node.children().filter(Node::is_element) {
            expect_tag(&t, "transform")?;
            rules.push(ProfileRule {
                id: required_attr(&t, "id")?.to_string(),
                rule: required_attr(&t, "rule")?.to_string(),
            });
        }
        set.insert(
            Profile {
                id: id.to_string(),
                rules,
            },
            catalog,
        )?;
    }
    Ok(set)
}

/// Writes profiles under an explicit `<profiles>` root using the same element
/// and attribute names [`parse_profiles`] reads.
pub fn serialize_profiles(set: &ProfileSet) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<profiles>\n");
    for profile in set.iter() {
        let _ = writeln!(out, "  <profile id=\"{}\">", escape(&profile.id));
        for rule in &profile.rules {
            let _ = writeln!(
                out,
                "    <transform id=\"{}\" rule=\"{}\" />",
                escape(&rule.id),
                escape(&rule.rule)
            );
        }
        out.push_str("  </profile>\n");
    }
    out.push_str("</profiles>\n");
    out
}

pub fn serialize_transformations(catalog: &TransformCatalog) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<transformations>\n");
    for def in catalog.iter() {
        let _ = writeln!(
            out,
            "  <transform id=\"{}\" description=\"{}\">\n    <mimetypesource>{}</mimetypesource>\n    <mimetypetarget>{}</mimetypetarget>\n    <library>{}</library>\n  </transform>",
            escape(&def.id),
            escape(&def.description),
            escape(def.source_mime.as_str()),
            escape(def.target_mime.as_str()),
            escape(&def.translator)
        );
    }
    out.push_str("</transformations>\n");
    out
}

// '>' is legal inside attribute values and keeps ids like "JPG->GIF" readable.
fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

// Replaces a leading `<?xml ...?>` with spaces so it can sit inside the
// synthetic root without shifting line or column numbers.
fn blank_declaration(xml: &str) -> String {
    let trimmed = xml.trim_start();
    if !trimmed.starts_with("<?xml") {
        return xml.to_string();
    }
    let start = xml.len() - trimmed.len();
    match trimmed.find("?>") {
        Some(end) => {
            let end = start + end + 2;
            let blanked: String = xml[start..end]
                .chars()
                .map(|c| if c == '\n' { '\n' } else { ' ' })
                .collect();
            format!("{}{}{}", &xml[..start], blanked, &xml[end..])
        }
        None => xml.to_string(),
    }
}

fn parse_error(err: roxmltree::Error, first_line_shift: u32) -> RulesError {
    let pos = err.pos();
    let column = if pos.row == 1 {
        pos.col.saturating_sub(first_line_shift).max(1)
    } else {
        pos.col
    };
    RulesError::Parse {
        line: pos.row,
        column,
        message: err.to_string(),
    }
}

fn expect_tag(node: &Node, name: &str) -> Result<(), RulesError> {
    if node.tag_name().name() == name {
        Ok(())
    } else {
        Err(RulesError::Schema(format!(
            "expected <{name}>, found <{}>",
            node.tag_name().name()
        )))
    }
}

fn required_attr<'a>(node: &Node<'a, '_>, name: &str) -> Result<&'a str, RulesError> {
    match node.attribute(name) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(RulesError::Schema(format!(
            "<{}> is missing attribute {name:?}",
            node.tag_name().name()
        ))),
    }
}

fn child_text<'a>(node: &Node<'a, '_>, name: &str, id: &str) -> Result<&'a str, RulesError> {
    let mut matches = node
        .children()
        .filter(|c| c.is_element() && c.tag_name().name() == name);
    let first = matches.next().ok_or_else(|| {
        RulesError::Schema(format!("transform {id:?} is missing <{name}>"))
    })?;
    if matches.next().is_some() {
        return Err(RulesError::Schema(format!(
            "transform {id:?} has more than one <{name}>"
        )));
    }
    let text = first.text().unwrap_or_default().trim();
    if text.is_empty() {
        return Err(RulesError::Schema(format!("transform {id:?} has an empty <{name}>")));
    }
    Ok(text)
}

fn media_child(node: &Node, name: &str, id: &str) -> Result<MediaType, RulesError> {
    MediaType::parse(child_text(node, name, id)?).map_err(|source| RulesError::InvalidMediaType {
        id: id.to_string(),
        source,
    })
}
