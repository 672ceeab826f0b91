fn main() {
    std::process::exit(oodmix_cli::run_cli(std::env::args_os()));
}
