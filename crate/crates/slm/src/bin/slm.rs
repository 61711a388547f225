fn main() {
    std::process::exit(slm::cli::main_from_args(std::env::args()));
}
