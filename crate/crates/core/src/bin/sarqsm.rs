fn main() {
    std::process::exit(sarqsm::cli::main_from_args(std::env::args_os()));
}
