fn main() {
    std::process::exit(rcm::cli::run());
}
