fn main() {
    std::process::exit(capcore_cli::run(std::env::args_os()));
}
