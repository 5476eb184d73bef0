fn main() {
    std::process::exit(inverse_cooking::cli::run(std::env::args_os()));
}
