fn main() {
    std::process::exit(accessperf_cli::main_with_args(std::env::args_os()));
}
