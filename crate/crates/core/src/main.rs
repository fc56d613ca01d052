fn main() {
    std::process::exit(prism::cli::run(std::env::args_os()));
}
