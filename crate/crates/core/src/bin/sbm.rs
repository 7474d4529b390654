fn main() {
    std::process::exit(sbm_core::cli::main_with_args(std::env::args_os()));
}
