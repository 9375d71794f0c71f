fn main() {
    std::process::exit(refdx::cli::main_with_args(std::env::args_os()));
}
