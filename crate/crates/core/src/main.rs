fn main() {
    migrasim::cli::init_logging();
    std::process::exit(migrasim::cli::run(std::env::args_os()));
}
