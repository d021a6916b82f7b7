fn main() {
    std::process::exit(lgan::cli::run_cli(std::env::args_os()));
}
