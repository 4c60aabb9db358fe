fn main() {
    std::process::exit(manifold_privacy::cli::main_with_args(std::env::args_os()));
}
