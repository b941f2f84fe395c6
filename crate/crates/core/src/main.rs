fn main() {
    std::process::exit(cocola::cli::run(std::env::args_os()));
}
