fn main() {
    std::process::exit(lrlm_cli::main_entry(std::env::args_os()));
}
