fn main() {
    std::process::exit(apsim::cli::main());
}
