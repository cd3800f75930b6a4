fn main() {
    std::process::exit(mmshift::cli::run(std::env::args_os()));
}
