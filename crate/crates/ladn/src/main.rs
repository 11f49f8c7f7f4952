fn main() {
    std::process::exit(ladn::cli::run());
}
