//! Chat-completion transport for the remote judge.

use std::time::Duration;

use motalk::judge::{chat_reply_text, chat_request_body, Transport};
use motalk::{Error, Result};

pub struct ChatTransport {
    agent: ureq::Agent,
    url: String,
    api_key: String,
    model: String,
}

impl ChatTransport {
    pub fn new(url: String, api_key: String, model: String, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        ChatTransport {
            agent,
            url,
            api_key,
            model,
        }
    }
}

impl Transport for ChatTransport {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String> {
        let fail = |message: String| Error::Transport {
            request_id: request_id.to_string(),
            message,
        };
        let mut response = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(chat_request_body(&self.model, prompt))
            .map_err(|e| fail(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(fail(format!(
                "HTTP {status}: {}",
                body.chars().take(200).collect::<String>()
            )));
        }
        let json: serde_json::Value = response.body_mut().read_json().map_err(|e| fail(e.to_string()))?;
        chat_reply_text(&json).ok_or_else(|| fail("response has no message content".into()))
    }
}
