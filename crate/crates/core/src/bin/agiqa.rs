fn main() {
    std::process::exit(agiqa_core::cli::run());
}
