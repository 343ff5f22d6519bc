fn main() {
    std::process::exit(cpcr::cli::run(std::env::args_os()));
}
