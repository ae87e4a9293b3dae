//! Chat-completions policy. Sends the rendered prompt as a single user
//! message and parses the decision out of the first choice.

use std::time::Duration;

use itrain_core::agent::{parse_decision, render_prompt, AgentDecision, AgentError, AgentObservation, Policy};
use serde_json::{json, Value};

pub struct ChatPolicy {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    template: String,
    http: reqwest::blocking::Client,
}

impl ChatPolicy {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, template: String) -> Result<Self, AgentError> {
        // Fail on a bad template now rather than at the first decision.
        render_prompt(&AgentObservation::default(), &template)?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| AgentError::Backend(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            template,
            http,
        })
    }

    fn complete(&self, prompt: &str) -> Result<String, AgentError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| AgentError::Backend(e.to_string()))?;
        let status = resp.status();
        let value: Value = resp.json().map_err(|e| AgentError::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(AgentError::Backend(format!("backend answered {status}: {value}")));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| AgentError::Backend("response has no choices[0].message.content".into()))
    }
}

impl Policy for ChatPolicy {
    fn decide(&mut self, obs: &AgentObservation) -> Result<AgentDecision, AgentError> {
        let prompt = render_prompt(obs, &self.template)?;
        parse_decision(&self.complete(&prompt)?)
    }
}
