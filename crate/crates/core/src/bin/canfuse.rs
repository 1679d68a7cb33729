fn main() {
    std::process::exit(canfuse::cli::run(std::env::args_os()));
}
