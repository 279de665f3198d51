fn main() {
    std::process::exit(lipmel::cli::run(std::env::args_os()));
}
