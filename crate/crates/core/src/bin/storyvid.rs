fn main() {
    std::process::exit(storyvid::cli::run(std::env::args_os()));
}
