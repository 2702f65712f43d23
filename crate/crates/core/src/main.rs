fn main() {
    std::process::exit(simcon::cli::run(std::env::args_os()));
}
