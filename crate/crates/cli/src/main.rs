fn main() {
    std::process::exit(sdci_cli::run(std::env::args_os()));
}
