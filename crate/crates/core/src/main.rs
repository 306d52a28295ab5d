fn main() {
    std::process::exit(quantkit::pipeline::cli::cli(std::env::args_os()));
}
