fn main() {
    std::process::exit(abscl_cli::run(std::env::args_os()));
}
