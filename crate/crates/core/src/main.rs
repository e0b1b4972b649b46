fn main() {
    std::process::exit(cdscene::cli::run());
}
