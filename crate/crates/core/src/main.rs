fn main() {
    std::process::exit(rmt_shrink::cli::run(std::env::args_os()));
}
