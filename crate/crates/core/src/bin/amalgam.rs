fn main() {
    std::process::exit(amalgam::cli::run(std::env::args_os()));
}
