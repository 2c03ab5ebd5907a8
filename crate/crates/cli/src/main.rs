fn main() {
    std::process::exit(bidtreecrf_cli::run(std::env::args_os()));
}
