fn main() {
    std::process::exit(metabalance::cli::main());
}
