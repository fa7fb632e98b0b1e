fn main() {
    std::process::exit(gkd_cli::main_with_args(std::env::args_os()));
}
