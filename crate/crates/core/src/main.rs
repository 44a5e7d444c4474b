fn main() {
    std::process::exit(fbcir_core::cli::main_with_args(std::env::args_os()));
}
