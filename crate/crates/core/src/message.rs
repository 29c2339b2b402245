//! Prover messages attached to commands.

use crate::eval::{next_serial, ProgramError};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    Writeln,
    Tracing,
    Warning,
    Error,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Writeln => "writeln",
            MessageKind::Tracing => "tracing",
            MessageKind::Warning => "warning",
            MessageKind::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "writeln" => MessageKind::Writeln,
            "tracing" => MessageKind::Tracing,
            "warning" => MessageKind::Warning,
            "error" => MessageKind::Error,
            _ => return None,
        })
    }
}

/// A message with its position (symbol offset within the command source)
/// and the serial that orders messages emerging at the same position.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Message {
    pub kind: MessageKind,
    pub text: String,
    pub position: usize,
    pub serial: u64,
}

impl Message {
    pub fn new(kind: MessageKind, text: impl Into<String>) -> Self {
        Message {
            kind,
            text: text.into(),
            position: 0,
            serial: next_serial(),
        }
    }

    pub fn writeln(text: impl Into<String>) -> Self {
        Self::new(MessageKind::Writeln, text)
    }

    pub fn warning(text: impl Into<String>) -> Self {
        Self::new(MessageKind::Warning, text)
    }

    /// Error message that keeps the serial of the failure it reports.
    pub fn error(error: &ProgramError) -> Self {
        Message {
            kind: MessageKind::Error,
            text: error.message.clone(),
            position: 0,
            serial: error.serial,
        }
    }

    pub fn at(mut self, position: usize) -> Self {
        self.position = position;
        self
    }

    /// Sort key: source position first, then order of emergence.
    pub fn order_key(&self) -> (usize, u64) {
        (self.position, self.serial)
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.text)
    }
}
