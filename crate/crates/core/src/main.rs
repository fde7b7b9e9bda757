fn main() {
    std::process::exit(hdvi_core::cli::main());
}
