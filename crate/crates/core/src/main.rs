fn main() {
    std::process::exit(kdlab::cli::run(std::env::args_os()));
}
