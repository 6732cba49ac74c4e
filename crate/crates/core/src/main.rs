fn main() {
    std::process::exit(vaesep::cli::run(std::env::args_os()));
}
