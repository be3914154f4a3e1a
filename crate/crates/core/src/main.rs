fn main() {
    std::process::exit(maskspec::cli::run(std::env::args_os()));
}
