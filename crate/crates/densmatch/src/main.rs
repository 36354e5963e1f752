fn main() {
    std::process::exit(densmatch::cli::run());
}
