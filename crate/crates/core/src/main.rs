fn main() {
    std::process::exit(maskgan::cli::run(std::env::args_os()));
}
