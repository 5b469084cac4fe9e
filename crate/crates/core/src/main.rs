fn main() {
    std::process::exit(layered_radiance::cli::run(std::env::args_os()));
}
