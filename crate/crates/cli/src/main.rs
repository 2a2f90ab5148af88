fn main() {
    std::process::exit(uniembed_cli::run(std::env::args_os()));
}
