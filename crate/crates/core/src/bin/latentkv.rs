fn main() {
    std::process::exit(latentkv::cli::main_with_args());
}
