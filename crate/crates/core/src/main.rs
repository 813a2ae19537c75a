fn main() {
    std::process::exit(flowhmm::cli::main_with_args(std::env::args_os()));
}
