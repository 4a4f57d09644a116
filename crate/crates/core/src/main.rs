fn main() {
    std::process::exit(swiftpan::cli::main());
}
