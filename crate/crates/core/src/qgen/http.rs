//! JSON-over-HTTP completion provider.

use super::provider::{Completion, CompletionRequest, Provider, ProviderConfig, ProviderError};
use std::time::Duration;

/// Environment variable holding the bearer token. Never read from config files.
pub const API_KEY_ENV: &str = "NDR_LLM_API_KEY";

/// POSTs `{"model", "prompt", "temperature", "max_tokens"}` and expects
/// `{"text", "prompt_tokens", "completion_tokens"}` back. Status 429 and 5xx
/// and transport errors are transient; other non-2xx statuses are permanent.
pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    model_name: String,
    api_key: Option<String>,
}

impl HttpProvider {
    /// Reads the API key from [`API_KEY_ENV`].
    pub fn from_env(cfg: &ProviderConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        if key.is_none() {
            log::warn!("{API_KEY_ENV} is not set; sending unauthenticated requests");
        }
        Self::with_api_key(cfg, key)
    }

    pub fn with_api_key(cfg: &ProviderConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: cfg.endpoint.clone(),
            model_name: cfg.model_name.clone(),
            api_key,
        }
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.model_name)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_json::<Completion>()
                .map_err(|e| ProviderError::Permanent(format!("malformed response body: {e}"))),
            429 | 500..=599 => Err(ProviderError::Transient(format!("HTTP {status}"))),
            _ => Err(ProviderError::Permanent(format!("HTTP {status}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one scripted `(status, body)` per connection and reports each
    /// request's headers and body.
    fn mock_server(script: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in script {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((headers, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1/complete"), rx)
    }

    fn request() -> CompletionRequest {
        CompletionRequest {
            model: "m1".into(),
            prompt: "Item: x\nQuery:".into(),
            temperature: 0.7,
            max_tokens: 300,
        }
    }

    #[test]
    fn wire_contract() {
        let ok = r#"{"text":"I want tacos.","prompt_tokens":5,"completion_tokens":3}"#;
        let (url, rx) = mock_server(vec![(200, ok.into())]);
        let cfg = ProviderConfig { endpoint: url, timeout_secs: 10.0, ..Default::default() };
        let p = HttpProvider::with_api_key(&cfg, Some("sekrit".into()));
        let c = p.complete(&request()).unwrap();
        assert_eq!(c.text, "I want tacos.");
        assert_eq!((c.prompt_tokens, c.completion_tokens), (5, 3));
        let (headers, body) = rx.recv().unwrap();
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer sekrit"));
        let sent: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(sent["model"], "m1");
        assert_eq!(sent["max_tokens"], 300);
        assert_eq!(sent["prompt"], "Item: x\nQuery:");
    }

    #[test]
    fn status_classification() {
        let (url, _rx) = mock_server(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (400, "{}".into()),
            (200, "not json".into()),
        ]);
        let cfg = ProviderConfig { endpoint: url, timeout_secs: 10.0, ..Default::default() };
        let p = HttpProvider::with_api_key(&cfg, None);
        assert!(matches!(p.complete(&request()), Err(ProviderError::Transient(_))));
        assert!(matches!(p.complete(&request()), Err(ProviderError::Transient(_))));
        assert!(matches!(p.complete(&request()), Err(ProviderError::Permanent(_))));
        assert!(matches!(p.complete(&request()), Err(ProviderError::Permanent(_))));
    }

    #[test]
    fn connection_refused_is_transient() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = ProviderConfig {
            endpoint: format!("http://127.0.0.1:{port}/x"),
            timeout_secs: 2.0,
            ..Default::default()
        };
        let p = HttpProvider::with_api_key(&cfg, None);
        assert!(matches!(p.complete(&request()), Err(ProviderError::Transient(_))));
    }
}
