fn main() {
    std::process::exit(irdfusion::cli::run());
}
