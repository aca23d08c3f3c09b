fn main() {
    std::process::exit(gcd::cli::run(std::env::args_os()));
}
