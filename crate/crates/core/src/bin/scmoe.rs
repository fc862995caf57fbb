fn main() {
    std::process::exit(scmoe::cli::main_with_args(std::env::args_os()));
}
