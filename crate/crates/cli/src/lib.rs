//! Command-line surface for pathmoe.
//!
//! Exit statuses: 0 success, 1 failed verification, 2 I/O or invalid
//! input, 3 malformed file or shape mismatch, 4 divergence in training.

pub mod args;
pub mod commands;
pub mod error;

pub use error::{exit, CliError, CliResult};

use args::{Cli, Command};

/// Runs one parsed invocation, printing results to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => {
            let s = commands::train(&a)?;
            if let Some(t) = &s.test {
                println!(
                    "best epoch {} valid MRR {:.4}",
                    s.best_epoch, s.best_valid.mrr
                );
                println!(
                    "test MRR {:.4}  H@1 {:.4}  H@10 {:.4}",
                    t.mrr, t.hit1, t.hit10
                );
            }
        }
        Command::Eval(a) => print!("{}", commands::eval(&a)?.1),
        Command::Ppr(a) => print!("{}", commands::ppr(&a)?),
        Command::Gradcheck(a) => print!("{}", commands::gradcheck(&a)?),
        Command::Inspect(a) => print!("{}", commands::inspect(&a)?),
    }
    Ok(())
}
