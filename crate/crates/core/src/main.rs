fn main() {
    std::process::exit(clonerec::cli::run(std::env::args_os()));
}
