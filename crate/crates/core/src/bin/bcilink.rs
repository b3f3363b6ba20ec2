fn main() {
    std::process::exit(bcilink::cli::main_with(std::env::args_os()));
}
