fn main() {
    std::process::exit(protodiag_cli::main_with_args(std::env::args_os()));
}
