fn main() {
    std::process::exit(scaledql::cli::run(std::env::args_os()));
}
