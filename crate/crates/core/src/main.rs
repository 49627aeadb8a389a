fn main() {
    std::process::exit(sslwb::cli::main_with(std::env::args_os()));
}
