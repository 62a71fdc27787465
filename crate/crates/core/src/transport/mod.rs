//! Envelope delivery. [`sim::SimNet`] is a seeded virtual-time network for
//! tests and scenarios; [`tcp`] runs each node behind a real socket. Both
//! record traffic into a [`Transcript`].

pub mod sim;
pub mod tcp;
mod transcript;

use thiserror::Error;

use crate::keyspace::Address;
use crate::protocol::ProtocolError;

pub use transcript::{EventKind, Transcript, TranscriptError, TranscriptEvent};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown destination {0}")]
    UnknownDestination(Address),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o with {peer}: {source}")]
    Io {
        peer: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Control(String),
}
