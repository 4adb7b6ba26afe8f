fn main() {
    std::process::exit(dhipf::cli::run(std::env::args_os()));
}
