fn main() {
    std::process::exit(tm_diffuse::cli::main_with_args(std::env::args_os()));
}
