fn main() {
    std::process::exit(amortflow_cli::run_command(std::env::args_os()));
}
