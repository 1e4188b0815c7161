fn main() {
    std::process::exit(kgc_cli::commands::run(std::env::args_os()));
}
