use clap::Parser;

fn main() {
    let cli = edmloc::cli::Cli::parse();
    match edmloc::cli::run(cli) {
        Ok(text) => print!("{text}"),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.code);
        }
    }
}
