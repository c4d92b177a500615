fn main() {
    std::process::exit(graphdepth::cli::run());
}
