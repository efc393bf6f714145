fn main() {
    std::process::exit(mcflab::cli::main_with_args(std::env::args_os()));
}
