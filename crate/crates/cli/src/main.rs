fn main() {
    std::process::exit(sfda2_cli::run_cli(std::env::args_os()));
}
