fn main() {
    std::process::exit(medrag_service::cli::run(std::env::args_os()));
}
