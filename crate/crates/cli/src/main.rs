//! `vanillanet` — train, collapse, check, and measure plain shortcut-free
//! conv nets from the command line.
//!
//! The binary is a thin single-threaded driver over the library: every
//! subcommand resolves its configuration (defaults, then an optional TOML
//! config file, then flags), calls the corresponding library entry points,
//! and reports through stdout plus the documented exit codes.

mod args;
mod commands;
mod config;
mod data_src;
mod manifest;

use clap::Parser;

use args::Cli;

/// Exit-code contract: 0 success, 1 usage, 2 data or file problems,
/// 3 numeric failures (non-finite values, refused or failed fusion,
/// verification out of tolerance).
mod exit {
    use vanillanet::Error;

    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;

    pub fn code(err: &Error) -> i32 {
        match err {
            Error::InvalidArg(_) => USAGE,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => DATA,
            Error::Numeric(_)
            | Error::NonFinite { .. }
            | Error::Fusion(_)
            | Error::Shape(_) => NUMERIC,
        }
    }
}

/// Put SIGPIPE back to its default disposition. The Rust runtime starts
/// with it ignored, which turns `vanillanet ... | head` into a broken-pipe
/// panic; a command-line tool should just end quietly like any other
/// filter in the pipeline.
#[cfg(unix)]
fn restore_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn restore_sigpipe() {}

fn main() {
    restore_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Remap clap's own exit codes: help and version are success,
            // everything else is the usage code.
            let code = if err.use_stderr() { exit::USAGE } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = commands::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit::code(&err));
    }
}
