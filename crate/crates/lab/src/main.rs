fn main() {
    std::process::exit(aroma_lab::cli::run(std::env::args_os()));
}
