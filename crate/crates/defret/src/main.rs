fn main() {
    std::process::exit(defret::cli::run());
}
