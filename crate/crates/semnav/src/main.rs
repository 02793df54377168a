fn main() {
    std::process::exit(semnav::cli::main());
}
