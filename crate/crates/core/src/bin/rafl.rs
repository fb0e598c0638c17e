fn main() {
    std::process::exit(rafl::cli::run(std::env::args_os()));
}
