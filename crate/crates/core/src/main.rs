fn main() {
    std::process::exit(kernel_coding::cli::main_with_args(std::env::args_os()));
}
