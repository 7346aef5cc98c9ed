fn main() {
    std::process::exit(petmae::cli::run(std::env::args_os()));
}
