fn main() {
    std::process::exit(hyperaug::cli::main_with_args(std::env::args_os()));
}
