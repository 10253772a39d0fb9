fn main() {
    std::process::exit(rap_core::cli::main());
}
