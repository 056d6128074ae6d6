fn main() {
    std::process::exit(gnnear::cli::main());
}
