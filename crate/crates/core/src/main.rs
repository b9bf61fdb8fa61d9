fn main() {
    std::process::exit(stein_select::cli::run());
}
