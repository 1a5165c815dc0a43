fn main() {
    std::process::exit(chivar::cli::main_with_args(std::env::args_os()));
}
