fn main() {
    std::process::exit(vinpaint_cli::main_with_args(std::env::args_os()));
}
