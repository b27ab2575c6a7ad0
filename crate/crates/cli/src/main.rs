fn main() {
    std::process::exit(mars_cli::run(std::env::args_os()));
}
