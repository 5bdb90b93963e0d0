fn main() {
    std::process::exit(detfed::cli::main_with_args(std::env::args_os()));
}
