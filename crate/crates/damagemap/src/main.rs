fn main() {
    std::process::exit(damagemap::cli::main_from_args(std::env::args_os()));
}
