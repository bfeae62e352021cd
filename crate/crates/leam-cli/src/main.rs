use clap::Parser;

fn main() {
    let cli = leam_cli::Cli::parse();
    match leam_cli::run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(error) => {
            eprintln!("error: {error:#}");
            std::process::exit(1);
        }
    }
}
