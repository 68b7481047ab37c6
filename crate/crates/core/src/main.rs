use clap::Parser;
use epe::cli::Cli;

// large tensor buffers churn quickly; a pooling allocator keeps them out of
// the kernel's page-fault path
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage / help text still prints in full; errors lead with the
            // machine-parsable prefix
            if e.use_stderr() {
                let first = e.to_string();
                let first = first.lines().next().unwrap_or("invalid arguments");
                eprintln!("error: {}", first.trim_start_matches("error: "));
                std::process::exit(2);
            }
            e.exit();
        }
    };
    match cli.run() {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
