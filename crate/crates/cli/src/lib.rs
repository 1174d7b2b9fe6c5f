//! Library surface of the `serialct` command: run-directory I/O and the
//! subcommand implementations, shared with the integration tests.

pub mod commands;
pub mod io;
