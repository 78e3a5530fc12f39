fn main() {
    std::process::exit(embrank::cli::run(std::env::args_os()));
}
