fn main() {
    std::process::exit(promptlab::cli::run(std::env::args_os()));
}
