fn main() {
    std::process::exit(smdt::cli::run(std::env::args_os()));
}
