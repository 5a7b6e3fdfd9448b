use clap::Parser;
use luminav_cli::cli::{run, Cli};
use std::process::ExitCode;

fn main() -> ExitCode {
    // Dying quietly when the reader hangs up (`luminav ... | head`) is the
    // expected pipeline behavior; Rust's runtime ignores SIGPIPE by default,
    // which turns a closed pipe into a print panic instead.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
