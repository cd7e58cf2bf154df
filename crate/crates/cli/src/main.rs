fn main() {
    std::process::exit(mrpkit_cli::run_cli(std::env::args_os()));
}
