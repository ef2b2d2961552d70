fn main() {
    std::process::exit(moit::cli::run());
}
