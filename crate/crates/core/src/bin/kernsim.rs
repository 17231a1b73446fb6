fn main() {
    std::process::exit(kernsim::cli::run(std::env::args_os()));
}
