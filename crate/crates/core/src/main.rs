fn main() {
    std::process::exit(pcadv::cli::main_with_args(std::env::args_os()));
}
