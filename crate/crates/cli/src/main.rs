fn main() {
    std::process::exit(taylorfold_cli::cli::main_with(std::env::args_os()));
}
