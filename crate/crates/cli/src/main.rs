fn main() {
    std::process::exit(pointabm_cli::run(std::env::args_os()));
}
