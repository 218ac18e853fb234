fn main() {
    std::process::exit(advdepth::cli::main_with_args(std::env::args_os()));
}
