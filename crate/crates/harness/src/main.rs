fn main() {
    std::process::exit(polyglot::cli::main_with_args(std::env::args()));
}
