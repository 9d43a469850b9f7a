fn main() {
    std::process::exit(profinfer::cli::run(std::env::args_os()));
}
