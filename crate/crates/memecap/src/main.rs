fn main() {
    std::process::exit(memecap::cli::run());
}
