fn main() {
    std::process::exit(difficulty_moe::cli::run(std::env::args_os()));
}
