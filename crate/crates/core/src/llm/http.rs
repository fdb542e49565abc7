use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{BackendError, ChatBackend, ChatTurn, Role, ToolInvocation, ToolSpec};

pub const DEFAULT_API_KEY_ENV: &str = "SOFORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads `endpoint`, `model`, `timeout_secs` and `api_key_env` from the
    /// backend parameters. The key itself only ever comes from the
    /// environment.
    pub fn from_params(params: &BTreeMap<String, String>) -> Result<Self, String> {
        let endpoint = params
            .get("endpoint")
            .cloned()
            .ok_or("http backend requires backend_params.endpoint")?;
        let model = params
            .get("model")
            .cloned()
            .ok_or("http backend requires backend_params.model")?;
        let key_env = params
            .get("api_key_env")
            .map(String::as_str)
            .unwrap_or(DEFAULT_API_KEY_ENV);
        let timeout = match params.get("timeout_secs") {
            Some(s) => Duration::from_secs(s.parse().map_err(|e| format!("timeout_secs: {e}"))?),
            None => Duration::from_secs(120),
        };
        Ok(Self {
            endpoint,
            model,
            api_key: std::env::var(key_env).ok().filter(|k| !k.is_empty()),
            timeout,
        })
    }
}

/// OpenAI-style chat-completions client with function tools.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { config, agent }
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::ToolResult => "tool",
    }
}

pub(crate) fn request_body(model: &str, turns: &[ChatTurn], tools: &[ToolSpec]) -> Value {
    let messages: Vec<Value> = turns
        .iter()
        .map(|t| {
            let mut m = Map::new();
            m.insert("role".into(), json!(role_name(t.role)));
            m.insert("content".into(), json!(t.content));
            if !t.tool_calls.is_empty() {
                let calls: Vec<Value> = t
                    .tool_calls
                    .iter()
                    .map(|c| {
                        json!({
                            "id": c.id,
                            "type": "function",
                            "function": {
                                "name": c.tool_name,
                                "arguments": serde_json::to_string(&c.arguments).unwrap_or_default(),
                            }
                        })
                    })
                    .collect();
                m.insert("tool_calls".into(), Value::Array(calls));
            }
            if let Some(id) = &t.tool_call_id {
                m.insert("tool_call_id".into(), json!(id));
            }
            Value::Object(m)
        })
        .collect();
    let mut body = json!({ "model": model, "messages": messages });
    if !tools.is_empty() {
        let specs: Vec<Value> = tools
            .iter()
            .map(|t| {
                let props: Map<String, Value> = t
                    .parameters
                    .iter()
                    .map(|p| (p.name.clone(), json!({ "type": p.type_hint })))
                    .collect();
                let required: Vec<&str> = t
                    .parameters
                    .iter()
                    .filter(|p| p.required)
                    .map(|p| p.name.as_str())
                    .collect();
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": { "type": "object", "properties": props, "required": required },
                    }
                })
            })
            .collect();
        body["tools"] = Value::Array(specs);
    }
    body
}

pub(crate) fn parse_reply(body: &Value) -> Result<ChatTurn, BackendError> {
    let msg = body
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message".into()))?;
    let mut turn = ChatTurn::assistant(msg.get("content").and_then(Value::as_str).unwrap_or(""));
    if let Some(calls) = msg.get("tool_calls").and_then(Value::as_array) {
        for call in calls {
            let id = call.get("id").and_then(Value::as_str).unwrap_or_default();
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::Malformed("tool call without a name".into()))?;
            let raw = call.pointer("/function/arguments");
            let args = match raw {
                Some(Value::String(s)) if s.trim().is_empty() => Map::new(),
                Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
                    Ok(Value::Object(o)) => o,
                    _ => return Err(BackendError::Malformed(format!("bad tool arguments: {s}"))),
                },
                Some(Value::Object(o)) => o.clone(),
                None | Some(Value::Null) => Map::new(),
                Some(other) => return Err(BackendError::Malformed(format!("bad tool arguments: {other}"))),
            };
            let arguments = args
                .into_iter()
                .map(|(k, v)| {
                    let v = match v {
                        Value::String(s) => s,
                        other => other.to_string(),
                    };
                    (k, v)
                })
                .collect();
            turn.tool_calls.push(ToolInvocation {
                id: id.to_string(),
                tool_name: name.to_string(),
                arguments,
            });
        }
    }
    Ok(turn)
}

fn retry_after(resp: &ureq::Response) -> Option<Duration> {
    resp.header("retry-after")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn complete(&mut self, turns: &[ChatTurn], tools: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        let body = request_body(&self.config.model, turns, tools);
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => {
                let value: Value = resp
                    .into_json()
                    .map_err(|e| BackendError::Malformed(format!("response is not JSON: {e}")))?;
                parse_reply(&value)
            }
            Err(ureq::Error::Status(code @ (429 | 503), resp)) => Err(BackendError::Throttled {
                retry_after: retry_after(&resp),
                detail: format!("HTTP {code}"),
            }),
            Err(ureq::Error::Status(code, resp)) if code >= 500 => {
                let text = resp.into_string().unwrap_or_default();
                Err(BackendError::Unreachable(format!("HTTP {code}: {text}")))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                Err(BackendError::Malformed(format!("HTTP {code}: {text}")))
            }
            Err(ureq::Error::Transport(t)) => Err(BackendError::Unreachable(t.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ToolParam;

    #[test]
    fn body_shape() {
        let mut a = ChatTurn::assistant("");
        a.tool_calls.push(ToolInvocation {
            id: "c1".into(),
            tool_name: "get_signature".into(),
            arguments: [("function".to_string(), "add".to_string())].into(),
        });
        let turns = [ChatTurn::system("s"), ChatTurn::user("u"), a, ChatTurn::tool_result("c1", "sig")];
        let tools = [ToolSpec {
            name: "get_signature".into(),
            description: "d".into(),
            parameters: vec![ToolParam {
                name: "function".into(),
                type_hint: "string".into(),
                required: true,
            }],
        }];
        let b = request_body("m", &turns, &tools);
        assert_eq!(b["messages"][3]["role"], "tool");
        assert_eq!(b["messages"][3]["tool_call_id"], "c1");
        assert_eq!(b["messages"][2]["tool_calls"][0]["function"]["arguments"], r#"{"function":"add"}"#);
        assert_eq!(b["tools"][0]["function"]["parameters"]["required"][0], "function");
    }

    #[test]
    fn reply_parsing() {
        let v = json!({"choices":[{"message":{"role":"assistant","content":null,
            "tool_calls":[{"id":"x","type":"function","function":{"name":"get_disassembly","arguments":"{\"function\":\"add\",\"n\":3}"}}]}}]});
        let t = parse_reply(&v).unwrap();
        assert_eq!(t.content, "");
        assert_eq!(t.tool_calls[0].arguments["function"], "add");
        assert_eq!(t.tool_calls[0].arguments["n"], "3");
        assert!(parse_reply(&json!({"choices":[]})).is_err());
    }

    #[test]
    fn params_require_endpoint_and_model() {
        let mut p = BTreeMap::new();
        assert!(HttpConfig::from_params(&p).is_err());
        p.insert("endpoint".into(), "http://127.0.0.1:1/v1/chat/completions".into());
        p.insert("model".into(), "m".into());
        p.insert("api_key_env".into(), "SOFORGE_TEST_UNSET_KEY_VAR".into());
        let c = HttpConfig::from_params(&p).unwrap();
        assert_eq!(c.api_key, None);
    }
}
