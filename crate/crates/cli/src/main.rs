fn main() {
    std::process::exit(prwb_cli::main_with_args(std::env::args_os()));
}
