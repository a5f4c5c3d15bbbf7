fn main() {
    std::process::exit(hierpart_cli::run(std::env::args_os()));
}
