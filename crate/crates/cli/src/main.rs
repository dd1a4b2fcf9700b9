fn main() {
    std::process::exit(sruxx_cli::run(std::env::args_os()));
}
