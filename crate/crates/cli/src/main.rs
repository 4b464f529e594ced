use clap::Parser;

fn main() {
    std::process::exit(rwre_lab::execute(rwre_lab::Cli::parse()));
}
