fn main() {
    std::process::exit(texanom::cli::run());
}
