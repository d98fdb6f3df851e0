fn main() {
    std::process::exit(longseq::cli::main_with_args(std::env::args_os()));
}
