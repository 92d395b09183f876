fn main() {
    std::process::exit(videorep::cli::run(std::env::args().skip(1).collect()));
}
