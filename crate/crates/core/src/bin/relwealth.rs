fn main() {
    std::process::exit(relwealth::cli::run_command(std::env::args_os()));
}
