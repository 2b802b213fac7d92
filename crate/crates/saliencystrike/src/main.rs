fn main() {
    std::process::exit(saliencystrike::cli::run());
}
