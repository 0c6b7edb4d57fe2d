fn main() {
    std::process::exit(figconv::cli::run(std::env::args_os()));
}
