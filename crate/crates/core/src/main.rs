fn main() {
    std::process::exit(segprune::cli::main_with_args(std::env::args_os()));
}
