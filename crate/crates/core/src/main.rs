fn main() {
    std::process::exit(distid::cli::main_with_args(std::env::args_os()));
}
