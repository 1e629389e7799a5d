fn main() {
    std::process::exit(proto_cil::cli::main_with_args(std::env::args_os()));
}
