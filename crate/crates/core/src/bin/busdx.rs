fn main() {
    std::process::exit(busdx::cli::main());
}
