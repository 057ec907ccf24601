fn main() {
    std::process::exit(mmrw::cli::run(std::env::args_os()));
}
