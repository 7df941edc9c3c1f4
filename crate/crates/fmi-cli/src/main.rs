fn main() {
    std::process::exit(fmi_cli::run(std::env::args_os()));
}
