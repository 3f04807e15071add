fn main() {
    std::process::exit(advdiff::cli::main());
}
