use clap::Parser;

fn main() {
    let cli = mkgd::cli::Cli::parse();
    let code = mkgd::cli::run(cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
