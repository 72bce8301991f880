fn main() {
    std::process::exit(metrack_cli::run(std::env::args_os()));
}
