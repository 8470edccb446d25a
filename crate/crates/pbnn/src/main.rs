fn main() {
    std::process::exit(pbnn::cli::run());
}
