fn main() {
    std::process::exit(setguard::cli::main_with(std::env::args_os()));
}
