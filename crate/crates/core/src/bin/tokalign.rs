fn main() {
    std::process::exit(tokalign::cli::run_cli(std::env::args_os()));
}
