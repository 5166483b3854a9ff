use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset description: {0}")]
    InvalidMeta(String),

    #[error("invalid node {node} for this dataset")]
    InvalidNode { node: NodeId },

    #[error("no value for field `{0}`")]
    MissingField(String),

    #[error("invalid sub-volume specification: {0}")]
    InvalidSpec(String),

    #[error("sub-volume {id}: {source}")]
    SubVolume {
        id: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("node {node} at timestep {timestep}: {source}")]
    Node {
        node: NodeId,
        timestep: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("corrupt octree store: {0}")]
    CorruptStore(String),

    #[error("octree store at {0} is incomplete (an interrupted build left its marker)")]
    IncompleteStore(PathBuf),

    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),

    #[error("connection: {0}")]
    Connection(#[from] io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
