use thiserror::Error;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("unknown image {0}")]
    UnknownImage(String),

    #[error("invalid user id {0:?}")]
    InvalidUser(String),

    #[error("unknown round {0}")]
    UnknownRound(u64),

    #[error("user {user} already has active round {round_id}")]
    ActiveRoundExists { user: String, round_id: u64 },

    #[error("round {0} is not active")]
    RoundNotActive(u64),

    #[error("round {0} is already finalized")]
    AlreadyFinalized(u64),

    #[error("round {0} is still active")]
    StillActive(u64),

    #[error("no playable images left")]
    NoImages,

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("corrupt game log: {0}")]
    CorruptLog(String),

    #[error(transparent)]
    Core(#[from] gala_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GameError>;
