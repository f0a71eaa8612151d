fn main() {
    std::process::exit(ecg_senet::cli::main_with_args(std::env::args_os()));
}
