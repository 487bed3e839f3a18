fn main() {
    std::process::exit(ctglip::cli::run());
}
