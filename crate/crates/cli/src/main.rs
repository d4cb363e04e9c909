fn main() {
    std::process::exit(xood_cli::main_with_args(std::env::args_os().collect()));
}
