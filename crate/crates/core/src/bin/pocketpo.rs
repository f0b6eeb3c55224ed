fn main() {
    std::process::exit(pocketpo::cli::main_with_args(std::env::args_os()));
}
