use std::collections::VecDeque;
use std::sync::Mutex;

use super::{BackendError, ChatBackend, ChatRequest, Purpose};

type Responder = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

/// One matching rule: purpose plus substrings that must all occur in the
/// request's combined message text.
pub struct ScriptRule {
    purpose: Option<Purpose>,
    needles: Vec<String>,
    answer: Answer,
}

enum Answer {
    Fixed(String),
    Sequence(Mutex<VecDeque<String>>),
    Dynamic(Responder),
}

/// Rule-driven fake model. Rules are tried in insertion order; the first
/// one that matches and still has an answer responds. Unmatched requests
/// fail with a provider error.
#[derive(Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    calls: Mutex<Vec<(Purpose, String)>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Always answer `response` when matched.
    pub fn on(mut self, purpose: Purpose, needles: &[&str], response: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            purpose: Some(purpose),
            needles: needles.iter().map(|s| s.to_string()).collect(),
            answer: Answer::Fixed(response.into()),
        });
        self
    }

    /// Answer with each response once, in order; the rule goes quiet after.
    pub fn on_seq<I, S>(mut self, purpose: Purpose, needles: &[&str], responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.rules.push(ScriptRule {
            purpose: Some(purpose),
            needles: needles.iter().map(|s| s.to_string()).collect(),
            answer: Answer::Sequence(Mutex::new(responses.into_iter().map(Into::into).collect())),
        });
        self
    }

    /// Compute the answer from the request; `None` passes to later rules.
    pub fn on_fn<F>(mut self, purpose: Option<Purpose>, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        self.rules.push(ScriptRule { purpose, needles: Vec::new(), answer: Answer::Dynamic(Box::new(f)) });
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("calls lock").len()
    }

    pub fn calls_for(&self, purpose: Purpose) -> Vec<String> {
        self.calls
            .lock()
            .expect("calls lock")
            .iter()
            .filter(|(p, _)| *p == purpose)
            .map(|(_, c)| c.clone())
            .collect()
    }

    pub fn calls(&self) -> Vec<(Purpose, String)> {
        self.calls.lock().expect("calls lock").clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let text: String =
            request.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        self.calls.lock().expect("calls lock").push((request.purpose, text.clone()));
        for rule in &self.rules {
            if rule.purpose.is_some_and(|p| p != request.purpose) {
                continue;
            }
            if !rule.needles.iter().all(|n| text.contains(n.as_str())) {
                continue;
            }
            let answer = match &rule.answer {
                Answer::Fixed(s) => Some(s.clone()),
                Answer::Sequence(q) => q.lock().expect("sequence lock").pop_front(),
                Answer::Dynamic(f) => f(request),
            };
            if let Some(a) = answer {
                return Ok(a);
            }
        }
        Err(BackendError::ProviderError(format!("no scripted response for {} request", request.purpose)))
    }
}
