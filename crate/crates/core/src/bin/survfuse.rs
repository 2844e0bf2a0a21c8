fn main() {
    std::process::exit(survfuse::cli::run(std::env::args_os()));
}
