//! Versioned prompt templates with `{{name}}` placeholders.
//!
//! A template file is a `version: N` line, a `---` line, then the body.
//! Substitution is a single pass: bound text is never rescanned, so compiler
//! output containing braces is inserted untouched.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    System,
    Analysis,
    Generation,
    CompileRepair,
    RuntimeRepair,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::System,
        TemplateId::Analysis,
        TemplateId::Generation,
        TemplateId::CompileRepair,
        TemplateId::RuntimeRepair,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::System => "system.txt",
            TemplateId::Analysis => "analysis.txt",
            TemplateId::Generation => "generation.txt",
            TemplateId::CompileRepair => "compile_repair.txt",
            TemplateId::RuntimeRepair => "runtime_repair.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateId::System => include_str!("../../templates/system.txt"),
            TemplateId::Analysis => include_str!("../../templates/analysis.txt"),
            TemplateId::Generation => include_str!("../../templates/generation.txt"),
            TemplateId::CompileRepair => include_str!("../../templates/compile_repair.txt"),
            TemplateId::RuntimeRepair => include_str!("../../templates/runtime_repair.txt"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template:?} needs a binding for {{{{{name}}}}}")]
    MissingPlaceholder { template: TemplateId, name: String },
    #[error("template {0}: {1}")]
    BadTemplate(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub version: u32,
    pub body: String,
}

impl Template {
    pub fn parse(origin: &str, text: &str) -> Result<Self, PromptError> {
        let bad = |m: &str| PromptError::BadTemplate(origin.to_string(), m.to_string());
        let (head, body) = text.split_once("\n---\n").ok_or_else(|| bad("missing '---' separator"))?;
        let version = head
            .trim()
            .strip_prefix("version:")
            .ok_or_else(|| bad("first line must be 'version: N'"))?
            .trim()
            .parse()
            .map_err(|_| bad("version is not a number"))?;
        Ok(Self {
            version,
            body: body.to_string(),
        })
    }

    /// Names of all placeholders, in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, name) in scan(&self.body) {
            if let Some(n) = name {
                if !out.iter().any(|o| o == n) {
                    out.push(n.to_string());
                }
            }
        }
        out
    }
}

/// Splits a body into literal chunks and placeholder names.
fn scan(body: &str) -> Vec<(&str, Option<&str>)> {
    let mut parts = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        let Some(close) = after.find("}}") else { break };
        let name = &after[..close];
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            parts.push((&rest[..open], Some(name)));
            rest = &after[close + 2..];
        } else {
            parts.push((&rest[..open + 2], None));
            rest = after;
        }
    }
    parts.push((rest, None));
    parts
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateId, Template>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let templates = TemplateId::ALL
            .iter()
            .map(|id| (*id, Template::parse(id.file_name(), id.builtin()).expect("builtin template parses")))
            .collect();
        Self { templates }
    }
}

impl PromptSet {
    /// Built-in templates, with any same-named files in `dir` taking precedence.
    pub fn load(dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut set = Self::default();
        if let Some(dir) = dir {
            for id in TemplateId::ALL {
                let path = dir.join(id.file_name());
                if path.is_file() {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| PromptError::BadTemplate(path.display().to_string(), e.to_string()))?;
                    set.templates.insert(id, Template::parse(&path.display().to_string(), &text)?);
                }
            }
        }
        Ok(set)
    }

    pub fn template(&self, id: TemplateId) -> &Template {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, context: &BTreeMap<String, String>) -> Result<String, PromptError> {
        render_template(id, self.template(id), context)
    }
}

pub fn render_template(
    id: TemplateId,
    template: &Template,
    context: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.body.len());
    for (literal, name) in scan(&template.body) {
        out.push_str(literal);
        if let Some(name) = name {
            let value = context.get(name).ok_or_else(|| PromptError::MissingPlaceholder {
                template: id,
                name: name.to_string(),
            })?;
            out.push_str(value);
        }
    }
    Ok(out)
}

/// Renders with the built-in templates.
pub fn render_prompt(id: TemplateId, context: &BTreeMap<String, String>) -> Result<String, PromptError> {
    PromptSet::default().render(id, context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn generation_contains_bindings_and_rules() {
        let text = render_prompt(
            TemplateId::Generation,
            &ctx(&[
                ("function_name", "add"),
                ("signature", "int64_t add(int64_t arg1, int64_t arg2)"),
                ("compile_cmd", "clang++ -g -O1 -fsanitize=fuzzer,address driver.cc -o driver.bin /x/libf.so"),
            ]),
        )
        .unwrap();
        assert!(text.contains("`add`"));
        assert!(text.contains("int64_t add(int64_t arg1, int64_t arg2)"));
        assert!(text.contains("clang++ -g -O1 -fsanitize=fuzzer,address driver.cc -o driver.bin /x/libf.so"));
        assert!(text.contains("Avoid data structures not found in the binary analysis"));
        assert!(text.contains("Only source code is output"));
        assert!(text.contains("Do not assume information about the function signature"));
    }

    #[test]
    fn system_prompt_persona() {
        let text = render_prompt(TemplateId::System, &ctx(&[("library_name", "libx.so")])).unwrap();
        assert!(text.starts_with("Act as a security researcher with a focus on fuzzing."));
    }

    #[test]
    fn missing_binding() {
        let err = render_prompt(TemplateId::Analysis, &ctx(&[("library_name", "l"), ("signature", "s")])).unwrap_err();
        assert_eq!(
            err,
            PromptError::MissingPlaceholder {
                template: TemplateId::Analysis,
                name: "function_name".into()
            }
        );
    }

    #[test]
    fn bound_text_is_not_rescanned() {
        let t = Template::parse("t", "version: 1\n---\nA {{x}} B {{ y }} {{}}").unwrap();
        let out = render_template(TemplateId::System, &t, &ctx(&[("x", "{{x}} }}{{")])).unwrap();
        assert_eq!(out, "A {{x}} }}{{ B {{ y }} {{}}");
        assert_eq!(t.placeholders(), ["x"]);
    }

    #[test]
    fn every_builtin_is_versioned() {
        let set = PromptSet::default();
        for id in TemplateId::ALL {
            assert_eq!(set.template(id).version, 1);
            assert!(!set.template(id).body.is_empty());
        }
        assert!(Template::parse("t", "no header").is_err());
    }

    #[test]
    fn override_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("system.txt"), "version: 2\n---\ncustom {{library_name}}").unwrap();
        let set = PromptSet::load(Some(dir.path())).unwrap();
        assert_eq!(set.template(TemplateId::System).version, 2);
        assert_eq!(set.render(TemplateId::System, &ctx(&[("library_name", "l")])).unwrap(), "custom l");
        assert_eq!(set.template(TemplateId::Analysis), PromptSet::default().template(TemplateId::Analysis));
    }

    proptest! {
        #[test]
        fn compile_repair_embeds_stderr_verbatim(stderr in "[ -~\n]{0,400}") {
            let text = render_prompt(TemplateId::CompileRepair, &ctx(&[
                ("function_name", "f"), ("attempt", "1"), ("max_attempts", "10"),
                ("compile_cmd", "cc"), ("stderr", &stderr),
            ])).unwrap();
            prop_assert!(text.contains(&stderr));
        }
    }
}
