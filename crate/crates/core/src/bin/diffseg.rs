fn main() {
    std::process::exit(diffseg::cli::run());
}
