fn main() {
    std::process::exit(sitqa_cli::run(std::env::args_os()));
}
