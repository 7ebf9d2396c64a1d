fn main() {
    std::process::exit(choicenet::cli::main_with_args(std::env::args_os()));
}
