fn main() {
    std::process::exit(trajdistill::harness::cli::run_cli(std::env::args_os()));
}
