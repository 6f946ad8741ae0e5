fn main() {
    std::process::exit(groundpose_cli::run(std::env::args_os()));
}
