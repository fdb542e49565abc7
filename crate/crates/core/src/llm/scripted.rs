use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatTurn, Role, ToolInvocation, ToolSpec};

/// Matches the latest USER or TOOL_RESULT content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Substring(String),
    /// Regular expression; named groups can be used as `${name}` in responses.
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedToolCall {
    pub tool_name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ScriptedToolCall>,
}

impl ScriptedResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }

    pub fn call(tool_name: &str, arguments: &[(&str, &str)]) -> Self {
        Self {
            content: String::new(),
            tool_calls: vec![ScriptedToolCall {
                tool_name: tool_name.into(),
                arguments: arguments
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
            }],
        }
    }
}

/// A rule answers with its responses in order; the last one repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub responses: Vec<ScriptedResponse>,
}

impl ScriptRule {
    pub fn new(matcher: Matcher, responses: Vec<ScriptedResponse>) -> Self {
        Self { matcher, responses }
    }
}

#[derive(Debug, Deserialize)]
struct RulesFile {
    rules: Vec<ScriptRule>,
}

pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    compiled: Vec<Option<Regex>>,
    cursors: Vec<usize>,
    next_id: u64,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self, String> {
        if rules.is_empty() {
            return Err("a scripted backend needs at least one rule".into());
        }
        let mut compiled = Vec::new();
        for (i, rule) in rules.iter().enumerate() {
            if rule.responses.is_empty() {
                return Err(format!("rule {i} has no responses"));
            }
            compiled.push(match &rule.matcher {
                Matcher::Substring(_) => None,
                Matcher::Pattern(p) => {
                    Some(Regex::new(p).map_err(|e| format!("rule {i}: bad pattern: {e}"))?)
                }
            });
        }
        let cursors = vec![0; rules.len()];
        Ok(Self {
            rules,
            compiled,
            cursors,
            next_id: 0,
        })
    }

    /// Rules file: `{"rules": [{"matcher": {"substring": "..."}, "responses": [...]}]}`.
    pub fn from_json_str(text: &str) -> Result<Self, String> {
        let file: RulesFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::new(file.rules)
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json_str(&text)
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn complete(&mut self, turns: &[ChatTurn], _tools: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        let prompt = turns
            .iter()
            .rev()
            .find(|t| matches!(t.role, Role::User | Role::ToolResult))
            .map(|t| t.content.as_str())
            .unwrap_or("");
        for (i, rule) in self.rules.iter().enumerate() {
            let captures = match (&rule.matcher, &self.compiled[i]) {
                (Matcher::Substring(s), _) => {
                    if !prompt.contains(s.as_str()) {
                        continue;
                    }
                    None
                }
                (Matcher::Pattern(_), Some(re)) => match re.captures(prompt) {
                    Some(c) => Some(c),
                    None => continue,
                },
                (Matcher::Pattern(_), None) => unreachable!("patterns are compiled in new()"),
            };
            let pick = self.cursors[i].min(rule.responses.len() - 1);
            self.cursors[i] += 1;
            let response = &rule.responses[pick];
            let expand = |s: &str| match &captures {
                Some(c) => {
                    let mut out = String::new();
                    c.expand(s, &mut out);
                    out
                }
                None => s.to_string(),
            };
            let mut turn = ChatTurn::assistant(expand(&response.content));
            for call in &response.tool_calls {
                self.next_id += 1;
                turn.tool_calls.push(ToolInvocation {
                    id: format!("call-{}", self.next_id),
                    tool_name: call.tool_name.clone(),
                    arguments: call.arguments.iter().map(|(k, v)| (k.clone(), expand(v))).collect(),
                });
            }
            return Ok(turn);
        }
        let head: String = prompt.chars().take(120).collect();
        Err(BackendError::NoRuleMatched(head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ask(b: &mut ScriptedBackend, prompt: &str) -> Result<ChatTurn, BackendError> {
        b.complete(&[ChatTurn::system("s"), ChatTurn::user(prompt)], &[])
    }

    #[test]
    fn echo_ok() {
        let mut b = ScriptedBackend::new(vec![ScriptRule::new(
            Matcher::Substring(String::new()),
            vec![ScriptedResponse::text("OK")],
        )])
        .unwrap();
        let t = ask(&mut b, "anything").unwrap();
        assert_eq!(t.content, "OK");
        assert!(t.tool_calls.is_empty());
    }

    #[test]
    fn sequence_then_repeat_last() {
        let mut b = ScriptedBackend::new(vec![ScriptRule::new(
            Matcher::Substring("generate".into()),
            vec![ScriptedResponse::text("broken"), ScriptedResponse::text("fixed")],
        )])
        .unwrap();
        let seen: Vec<_> = (0..3).map(|_| ask(&mut b, "please generate").unwrap().content).collect();
        assert_eq!(seen, ["broken", "fixed", "fixed"]);
    }

    #[test]
    fn no_match() {
        let mut b = ScriptedBackend::new(vec![ScriptRule::new(
            Matcher::Substring("generate".into()),
            vec![ScriptedResponse::text("x")],
        )])
        .unwrap();
        assert!(matches!(ask(&mut b, "hello"), Err(BackendError::NoRuleMatched(_))));
    }

    #[test]
    fn first_matching_rule_wins_and_captures_expand() {
        let mut b = ScriptedBackend::new(vec![
            ScriptRule::new(
                Matcher::Pattern(r"function: `(?P<f>\w+)`".into()),
                vec![ScriptedResponse::call("get_disassembly", &[("function", "${f}")])],
            ),
            ScriptRule::new(Matcher::Substring(String::new()), vec![ScriptedResponse::text("z")]),
        ])
        .unwrap();
        let t = ask(&mut b, "Target function: `add`").unwrap();
        assert_eq!(t.tool_calls[0].arguments["function"], "add");
        assert_eq!(t.tool_calls[0].id, "call-1");
        assert_eq!(ask(&mut b, "other").unwrap().content, "z");
    }

    #[test]
    fn matches_latest_tool_result() {
        let mut b = ScriptedBackend::new(vec![ScriptRule::new(
            Matcher::Substring("disasm-output".into()),
            vec![ScriptedResponse::text("seen")],
        )])
        .unwrap();
        let mut a = ChatTurn::assistant("");
        a.tool_calls.push(ToolInvocation {
            id: "c".into(),
            tool_name: "t".into(),
            arguments: BTreeMap::new(),
        });
        let turns = [
            ChatTurn::system("s"),
            ChatTurn::user("go"),
            a,
            ChatTurn::tool_result("c", "disasm-output"),
        ];
        assert_eq!(b.complete(&turns, &[]).unwrap().content, "seen");
    }

    #[test]
    fn rules_file_and_validation() {
        let b = ScriptedBackend::from_json_str(
            r#"{"rules":[{"matcher":{"substring":"a"},"responses":[{"content":"b"}]}]}"#,
        );
        assert!(b.is_ok());
        assert!(ScriptedBackend::new(vec![]).is_err());
        assert!(ScriptedBackend::new(vec![ScriptRule::new(Matcher::Pattern("(".into()), vec![
            ScriptedResponse::text("x")
        ])])
        .is_err());
    }
}
