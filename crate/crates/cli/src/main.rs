fn main() {
    std::process::exit(artipoint_cli::run(std::env::args_os()));
}
