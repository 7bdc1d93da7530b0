fn main() {
    std::process::exit(dklgp::cli::run());
}
