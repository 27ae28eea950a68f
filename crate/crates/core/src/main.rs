fn main() {
    std::process::exit(popelab::harness::cli::main_with_args(std::env::args_os()));
}
