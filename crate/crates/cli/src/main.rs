fn main() {
    std::process::exit(cpforest_cli::run(std::env::args_os()));
}
