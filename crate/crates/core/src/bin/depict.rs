fn main() {
    std::process::exit(depict::cli::main_dispatch(std::env::args_os()));
}
