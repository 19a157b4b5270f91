//! Few-shot prompt templates.
//!
//! Template files are UTF-8 text split into `[SECTION]` blocks. Lines starting
//! with `#` are comments. A narrative template has `INSTRUCTION`,
//! `EXAMPLE_1`..`EXAMPLE_3` and `PREFIXES`; a grounded template has
//! `INSTRUCTION`, `EXAMPLE` and `PREFIXES`.

use super::QgenError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_NARRATIVE_TEMPLATE: &str = include_str!("../../templates/narrative_v1.txt");
pub const DEFAULT_GROUNDED_TEMPLATE: &str = include_str!("../../templates/grounded_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub snippets: Vec<String>,
    pub query: String,
}

/// Instruction, three worked examples and the line prefixes of a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub fewshot_examples: Vec<FewShotExample>,
    pub item_prefix: String,
    pub query_prefix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_NARRATIVE_TEMPLATE).expect("bundled template parses")
    }
}

fn sections(text: &str) -> Result<BTreeMap<String, Vec<String>>, QgenError> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
            let name = trimmed[1..trimmed.len() - 1].trim().to_string();
            if out.contains_key(&name) {
                return Err(QgenError::Template(format!("duplicate section [{name}]")));
            }
            out.insert(name.clone(), Vec::new());
            current = Some(name);
            continue;
        }
        match &current {
            Some(name) => out.get_mut(name).unwrap().push(line.to_string()),
            None if trimmed.is_empty() => {}
            None => return Err(QgenError::Template(format!("text outside a section: {trimmed}"))),
        }
    }
    Ok(out)
}

fn prefixes(sec: &BTreeMap<String, Vec<String>>) -> Result<BTreeMap<String, String>, QgenError> {
    let lines = sec
        .get("PREFIXES")
        .ok_or_else(|| QgenError::Template("missing [PREFIXES]".into()))?;
    let mut out = BTreeMap::new();
    for l in lines.iter().filter(|l| !l.trim().is_empty()) {
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| QgenError::Template(format!("bad prefix line: {l}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn required(map: &BTreeMap<String, String>, key: &str) -> Result<String, QgenError> {
    match map.get(key) {
        Some(v) if !v.is_empty() => Ok(v.clone()),
        _ => Err(QgenError::Template(format!("missing prefix {key}"))),
    }
}

fn joined_text(lines: &[String]) -> String {
    lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Collapses all whitespace (including newlines) to single spaces.
pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, QgenError> {
        let sec = sections(text)?;
        let pre = prefixes(&sec)?;
        let item_prefix = required(&pre, "item_prefix")?;
        let query_prefix = required(&pre, "query_prefix")?;
        let instruction = joined_text(
            sec.get("INSTRUCTION")
                .ok_or_else(|| QgenError::Template("missing [INSTRUCTION]".into()))?,
        );
        let mut fewshot_examples = Vec::new();
        for i in 1..=3 {
            let name = format!("EXAMPLE_{i}");
            let lines = sec
                .get(&name)
                .ok_or_else(|| QgenError::Template(format!("missing [{name}]")))?;
            let mut snippets = Vec::new();
            let mut query = None;
            for l in lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
                if let Some(rest) = l.strip_prefix(&item_prefix) {
                    snippets.push(rest.trim().to_string());
                } else if let Some(rest) = l.strip_prefix(&query_prefix) {
                    query = Some(rest.trim().to_string());
                } else {
                    return Err(QgenError::Template(format!("[{name}]: unexpected line {l}")));
                }
            }
            let query = query.ok_or_else(|| QgenError::Template(format!("[{name}] has no query")))?;
            if snippets.is_empty() {
                return Err(QgenError::Template(format!("[{name}] has no items")));
            }
            fewshot_examples.push(FewShotExample { snippets, query });
        }
        if sec.keys().any(|k| k.starts_with("EXAMPLE_") && !matches!(k.as_str(), "EXAMPLE_1" | "EXAMPLE_2" | "EXAMPLE_3")) {
            return Err(QgenError::Template("exactly three examples are allowed".into()));
        }
        let t = PromptTemplate {
            instruction,
            fewshot_examples,
            item_prefix,
            query_prefix,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), QgenError> {
        if self.fewshot_examples.len() != 3 {
            return Err(QgenError::Template(format!(
                "expected 3 few-shot examples, found {}",
                self.fewshot_examples.len()
            )));
        }
        if self.item_prefix.is_empty() || self.query_prefix.is_empty() {
            return Err(QgenError::Template("empty prefix".into()));
        }
        Ok(())
    }

    fn push_items(&self, out: &mut String, snippets: &[String]) {
        for s in snippets {
            out.push_str(&self.item_prefix);
            out.push(' ');
            out.push_str(&one_line(s));
            out.push('\n');
        }
    }

    /// Renders the prompt: instruction, the three examples, then the target
    /// items followed by a bare query prefix for the model to complete.
    pub fn render(&self, snippets: &[String]) -> Result<String, QgenError> {
        if snippets.is_empty() {
            return Err(QgenError::EmptySnippet("no snippets given".into()));
        }
        if let Some(i) = snippets.iter().position(|s| s.trim().is_empty()) {
            return Err(QgenError::EmptySnippet(format!("snippet {i} is empty")));
        }
        self.validate()?;
        let mut out = String::new();
        out.push_str(&self.instruction);
        out.push_str("\n\n");
        for ex in &self.fewshot_examples {
            self.push_items(&mut out, &ex.snippets);
            out.push_str(&self.query_prefix);
            out.push(' ');
            out.push_str(&one_line(&ex.query));
            out.push_str("\n\n");
        }
        self.push_items(&mut out, snippets);
        out.push_str(&self.query_prefix);
        Ok(out)
    }
}

/// Renders a narrative-query prompt for `snippets`.
pub fn build_prompt(template: &PromptTemplate, snippets: &[String]) -> Result<String, QgenError> {
    template.render(snippets)
}

/// One-shot template for the grounded generation baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedTemplate {
    pub instruction: String,
    pub example_request: String,
    pub example_items: Vec<String>,
    pub request_prefix: String,
    pub list_prefix: String,
}

impl Default for GroundedTemplate {
    fn default() -> Self {
        GroundedTemplate::parse(DEFAULT_GROUNDED_TEMPLATE).expect("bundled template parses")
    }
}

impl GroundedTemplate {
    pub fn parse(text: &str) -> Result<Self, QgenError> {
        let sec = sections(text)?;
        let pre = prefixes(&sec)?;
        let request_prefix = required(&pre, "request_prefix")?;
        let list_prefix = required(&pre, "list_prefix")?;
        let instruction = joined_text(
            sec.get("INSTRUCTION")
                .ok_or_else(|| QgenError::Template("missing [INSTRUCTION]".into()))?,
        );
        let lines = sec
            .get("EXAMPLE")
            .ok_or_else(|| QgenError::Template("missing [EXAMPLE]".into()))?;
        let mut example_request = None;
        let mut example_items = Vec::new();
        for l in lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
            if let Some(rest) = l.strip_prefix(&request_prefix) {
                example_request = Some(rest.trim().to_string());
            } else if let Some(item) = parse_list_line(l) {
                example_items.push(item);
            } else {
                return Err(QgenError::Template(format!("[EXAMPLE]: unexpected line {l}")));
            }
        }
        Ok(GroundedTemplate {
            instruction,
            example_request: example_request
                .ok_or_else(|| QgenError::Template("[EXAMPLE] has no request".into()))?,
            example_items,
            request_prefix,
            list_prefix,
        })
    }

    pub fn render(&self, query: &str) -> String {
        let mut out = String::new();
        out.push_str(&self.instruction);
        out.push_str("\n\n");
        out.push_str(&format!("{} {}\n{}\n", self.request_prefix, one_line(&self.example_request), self.list_prefix));
        for (i, item) in self.example_items.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, item));
        }
        out.push('\n');
        out.push_str(&format!("{} {}\n{}", self.request_prefix, one_line(query), self.list_prefix));
        out
    }
}

/// Parses `"3. Some place"` or `"3) Some place"` into `"Some place"`.
pub fn parse_list_line(line: &str) -> Option<String> {
    let line = line.trim();
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    let item = rest.trim();
    (!item.is_empty()).then(|| item.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trivial() -> PromptTemplate {
        PromptTemplate {
            instruction: "Write.".into(),
            fewshot_examples: (0..3)
                .map(|i| FewShotExample {
                    snippets: vec![format!("s{i}")],
                    query: format!("q{i}"),
                })
                .collect(),
            item_prefix: "Item:".into(),
            query_prefix: "Query:".into(),
        }
    }

    #[test]
    fn bundled_templates_parse() {
        let t = PromptTemplate::default();
        assert_eq!(t.fewshot_examples.len(), 3);
        assert_eq!(t.item_prefix, "Item:");
        assert!(t.instruction.starts_with("Write a single-paragraph"));
        let g = GroundedTemplate::default();
        assert_eq!(g.example_items.len(), 10);
    }

    #[test]
    fn single_snippet_ends_with_query_prefix() {
        let p = build_prompt(&trivial(), &["great tacos".into()]).unwrap();
        assert!(p.ends_with("Query:"));
        assert!(p.contains("Item: great tacos\nQuery:"));
    }

    #[test]
    fn ten_snippets_ten_item_lines_in_target() {
        let snippets: Vec<String> = (0..10).map(|i| format!("snippet {i}")).collect();
        let p = build_prompt(&trivial(), &snippets).unwrap();
        let target = p.rsplit("\n\n").next().unwrap();
        assert_eq!(target.lines().filter(|l| l.starts_with("Item:")).count(), 10);
    }

    #[test]
    fn render_is_deterministic() {
        let s = vec!["a".to_string(), "b".to_string()];
        let t = PromptTemplate::default();
        assert_eq!(build_prompt(&t, &s).unwrap(), build_prompt(&t, &s).unwrap());
    }

    #[test]
    fn empty_snippet_rejected() {
        assert!(matches!(
            build_prompt(&trivial(), &["ok".into(), "  ".into()]),
            Err(QgenError::EmptySnippet(_))
        ));
        assert!(build_prompt(&trivial(), &[]).is_err());
    }

    #[test]
    fn wrong_example_count_rejected() {
        let text = DEFAULT_NARRATIVE_TEMPLATE.replace("[EXAMPLE_3]", "[OTHER]");
        assert!(PromptTemplate::parse(&text).is_err());
        let mut t = trivial();
        t.fewshot_examples.pop();
        assert!(build_prompt(&t, &["x".into()]).is_err());
    }

    #[test]
    fn grounded_prompt_has_one_example() {
        let g = GroundedTemplate::default();
        let p = g.render("I want tacos.");
        assert_eq!(p.matches("Request:").count(), 2);
        assert!(p.ends_with("Recommendations:"));
    }

    #[test]
    fn list_line_parsing() {
        assert_eq!(parse_list_line("3. Taco stand"), Some("Taco stand".into()));
        assert_eq!(parse_list_line("10) Noodle bar"), Some("Noodle bar".into()));
        assert_eq!(parse_list_line("Taco stand"), None);
        assert_eq!(parse_list_line("4."), None);
    }
}
