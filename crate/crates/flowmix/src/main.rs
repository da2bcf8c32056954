fn main() {
    std::process::exit(flowmix::cli::main_with_args(std::env::args_os()));
}
