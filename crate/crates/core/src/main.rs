fn main() {
    std::process::exit(chunkq::cli::run(std::env::args_os()));
}
