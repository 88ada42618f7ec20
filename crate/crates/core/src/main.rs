fn main() {
    std::process::exit(sfmim::cli::main());
}
