fn main() {
    std::process::exit(lrasr::cli::run(std::env::args_os()));
}
