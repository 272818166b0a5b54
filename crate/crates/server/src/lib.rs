//! Operator surface for `clinsim`: the command-line tool and the HTTP API
//! used for human-doctor sessions and reader ratings.

pub mod cli;
pub mod reviews;
pub mod service;
pub mod session;
