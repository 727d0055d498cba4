use std::collections::VecDeque;
use std::sync::Mutex;

use serde_json::Value;

use super::{BackendError, BackendReply, ChatBackend, ChatRequest, ToolCall};
use crate::text::fnv1a64;

/// One scripted backend outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum MockStep {
    Reply(String),
    Call { name: String, arguments: Value },
    /// Transport failure (retriable).
    Fail(String),
}

impl MockStep {
    pub fn call(name: &str, arguments: Value) -> Self {
        MockStep::Call {
            name: name.into(),
            arguments,
        }
    }
}

type Responder = dyn Fn(&ChatRequest) -> MockStep + Send + Sync;

enum Mode {
    Script(VecDeque<MockStep>),
    Responder(Box<Responder>),
}

/// Deterministic in-process backend, either a fixed script consumed in order
/// or a pure function of the request.
pub struct MockBackend {
    mode: Mutex<Mode>,
}

impl MockBackend {
    pub fn scripted(steps: impl IntoIterator<Item = MockStep>) -> Self {
        Self {
            mode: Mutex::new(Mode::Script(steps.into_iter().collect())),
        }
    }

    pub fn responder(f: impl Fn(&ChatRequest) -> MockStep + Send + Sync + 'static) -> Self {
        Self {
            mode: Mutex::new(Mode::Responder(Box::new(f))),
        }
    }

    /// Steps not yet consumed (always 0 for responder mocks).
    pub fn remaining(&self) -> usize {
        match &*self.mode.lock().expect("mock poisoned") {
            Mode::Script(s) => s.len(),
            Mode::Responder(_) => 0,
        }
    }
}

fn call_id(request: &ChatRequest) -> String {
    let body = serde_json::to_string(&request.messages).expect("messages serialize");
    format!("call-{:016x}", fnv1a64(body.as_bytes()))
}

fn to_reply(step: MockStep, request: &ChatRequest) -> Result<BackendReply, BackendError> {
    match step {
        MockStep::Reply(t) => Ok(BackendReply::Text(t)),
        MockStep::Fail(e) => Err(BackendError::Transport(e)),
        MockStep::Call { name, arguments } => {
            let arguments = match arguments {
                Value::Object(m) => m.into_iter().collect(),
                Value::Null => Default::default(),
                other => return Err(BackendError::Fatal(format!("mock tool arguments must be an object, got {other}"))),
            };
            Ok(BackendReply::ToolCalls(vec![ToolCall::new(call_id(request), name, arguments)]))
        }
    }
}

impl ChatBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn chat(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let step = match &mut *self.mode.lock().expect("mock poisoned") {
            Mode::Script(s) => s
                .pop_front()
                .ok_or_else(|| BackendError::Fatal("mock script exhausted".into()))?,
            Mode::Responder(f) => f(request),
        };
        to_reply(step, request)
    }
}
