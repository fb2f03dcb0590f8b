fn main() {
    std::process::exit(wuneng::cli::run(std::env::args_os()));
}
