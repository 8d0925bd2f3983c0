fn main() {
    std::process::exit(tgt::cli::run(std::env::args().skip(1).collect()));
}
