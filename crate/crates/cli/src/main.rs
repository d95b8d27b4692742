fn main() {
    std::process::exit(mantis_cli::run(std::env::args_os()));
}
