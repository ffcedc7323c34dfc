//! Caption templates for teacher text embeddings: plain-text lines with a
//! single `{}` slot for the class name.

use std::path::Path;

use crate::error::{Error, Result};

/// Parses one template per non-blank line, validating the `{}` slot count.
pub fn parse_templates(text: &str) -> Result<Vec<String>> {
    let mut templates = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let slots = line.matches("{}").count();
        if slots != 1 {
            return Err(Error::Template(format!(
                "line {}: expected exactly one {{}} slot, found {slots} in {line:?}",
                i + 1
            )));
        }
        templates.push(line.to_string());
    }
    if templates.is_empty() {
        return Err(Error::Template("no templates found".into()));
    }
    Ok(templates)
}

pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    parse_templates(&std::fs::read_to_string(path)?)
}

/// The built-in ensemble; every instantiation with a two-word class name
/// fits the desk text length.
pub fn builtin_templates() -> Vec<String> {
    parse_templates(include_str!("../../assets/templates.txt")).expect("built-in templates parse")
}

/// Fills the class name into the template's slot.
pub fn instantiate(template: &str, class_name: &str) -> Result<String> {
    if template.matches("{}").count() != 1 {
        return Err(Error::Template(format!(
            "template {template:?} must contain exactly one {{}} slot"
        )));
    }
    Ok(template.replacen("{}", class_name, 1))
}
